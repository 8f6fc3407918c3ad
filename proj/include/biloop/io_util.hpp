#pragma once

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ios>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "biloop/error.hpp"

namespace biloop::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

/// Every text artifact starts with "# biloop-<kind> v<version>".
inline void write_header(std::ostream& os, std::string_view kind, int version) {
  os << "# biloop-" << kind << " v" << version << '\n';
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
}

/// Parses a header line. Returns the version if the line is a biloop header
/// for `kind`, nullopt if it is not a biloop header at all. Throws if it is a
/// header for another kind.
inline std::optional<int> parse_header(std::string_view line, std::string_view kind) {
  constexpr std::string_view prefix = "# biloop-";
  if (line.substr(0, prefix.size()) != prefix) return std::nullopt;
  std::istringstream is{std::string(line.substr(prefix.size()))};
  std::string k, v;
  is >> k >> v;
  if (k != kind) {
    fail(ErrorCategory::Format, "expected a '" + std::string(kind) + "' file, found '" + k + "'");
  }
  if (v.size() < 2 || v[0] != 'v') fail(ErrorCategory::Format, "malformed version in header");
  return std::stoi(v.substr(1));
}

inline void check_version(int found, int supported, std::string_view kind) {
  if (found != supported) {
    fail(ErrorCategory::Format, "unsupported " + std::string(kind) + " version v" +
                                    std::to_string(found) + " (supported: v" +
                                    std::to_string(supported) + ")");
  }
}

/// Reads the header line of a required-header artifact and validates it.
inline void expect_header(std::istream& is, std::string_view kind, int supported) {
  std::string line;
  if (!std::getline(is, line)) fail(ErrorCategory::Format, "empty " + std::string(kind) + " file");
  const auto v = parse_header(line, kind);
  if (!v) fail(ErrorCategory::Format, "missing biloop-" + std::string(kind) + " header");
  check_version(*v, supported, kind);
}

inline std::ifstream open_in(const fs::path& p, std::ios::openmode mode = std::ios::in) {
  std::ifstream f(p, mode);
  if (!f) fail(ErrorCategory::Io, "cannot open '" + p.string() + "' for reading");
  return f;
}

inline std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, mode | std::ios::trunc);
  if (!f) fail(ErrorCategory::Io, "cannot open '" + p.string() + "' for writing");
  f << std::setprecision(std::numeric_limits<double>::max_digits10);
  return f;
}

/// Strips '#' comments and surrounding whitespace; empty result means skip.
inline std::string_view strip_comment(std::string_view line) {
  if (auto pos = line.find('#'); pos != std::string_view::npos) line = line.substr(0, pos);
  while (!line.empty() && std::isspace(static_cast<unsigned char>(line.front()))) line.remove_prefix(1);
  while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.remove_suffix(1);
  return line;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorCategory::Format, "unexpected end of binary stream");
  return v;
}

inline std::string read_text_file(const fs::path& p) {
  auto f = open_in(p);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text_file(const fs::path& p, std::string_view content) {
  auto f = open_out(p);
  f << content;
}

}  // namespace biloop::io
