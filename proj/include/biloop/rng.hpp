#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace biloop {

using Rng = std::mt19937_64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// FNV-1a, stable across platforms unlike std::hash.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

/// Derives an independent seed for a named substream of a root seed.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name,
                                    std::uint64_t index = 0) {
  return detail::splitmix64(detail::splitmix64(root ^ detail::fnv1a(name)) + index);
}

inline Rng make_rng(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
  return Rng(substream_seed(root, name, index));
}

}  // namespace biloop
