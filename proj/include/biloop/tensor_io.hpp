#pragma once

// Versioned binary container of named float32 tensors.
//
//   char[8]  magic "BLTENSOR"
//   uint32   format version
//   uint32   metadata length, then that many bytes of JSON
//   uint32   tensor count
//   per tensor (sorted by name):
//     uint32 name length, name bytes
//     uint32 rank, uint32 dims[rank]
//     float32 values, row major
// All integers and floats little endian.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "biloop/descriptors.hpp"
#include "biloop/error.hpp"
#include "biloop/io_util.hpp"

namespace biloop {

inline constexpr char kTensorMagic[8] = {'B', 'L', 'T', 'E', 'N', 'S', 'O', 'R'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

struct Tensor {
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};

class TensorArchive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, const Matrix& m) {
    Tensor t;
    t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.values.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        t.values[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    tensors_[name] = std::move(t);
  }

  void put(const std::string& name, const Vector& v) {
    Tensor t;
    t.shape = {static_cast<std::uint32_t>(v.size())};
    t.values.assign(v.data(), v.data() + v.size());
    tensors_[name] = std::move(t);
  }

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  Matrix matrix(const std::string& name) const {
    const auto& t = at(name);
    if (t.shape.size() != 2) fail(ErrorCategory::Format, "tensor '" + name + "' is not a matrix");
    Matrix m(t.shape[0], t.shape[1]);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        m(r, c) = t.values[static_cast<std::size_t>(r * m.cols() + c)];
    return m;
  }

  Vector vector(const std::string& name) const {
    const auto& t = at(name);
    if (t.shape.size() != 1) fail(ErrorCategory::Format, "tensor '" + name + "' is not a vector");
    Vector v(t.shape[0]);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = t.values[static_cast<std::size_t>(i)];
    return v;
  }

  void write(std::ostream& os) const {
    os.write(kTensorMagic, sizeof(kTensorMagic));
    io::write_pod(os, kTensorFormatVersion);
    const std::string m = meta.dump();
    io::write_pod(os, static_cast<std::uint32_t>(m.size()));
    os.write(m.data(), static_cast<std::streamsize>(m.size()));
    io::write_pod(os, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
      io::write_pod(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      io::write_pod(os, static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) io::write_pod(os, d);
      os.write(reinterpret_cast<const char*>(t.values.data()),
               static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    }
  }

  static TensorArchive read(std::istream& is) {
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || !std::equal(magic, magic + 8, kTensorMagic)) {
      fail(ErrorCategory::Format, "not a biloop tensor container");
    }
    io::check_version(static_cast<int>(io::read_pod<std::uint32_t>(is)),
                      static_cast<int>(kTensorFormatVersion), "tensor container");
    TensorArchive a;
    const auto meta_len = io::read_pod<std::uint32_t>(is);
    std::string m(meta_len, '\0');
    is.read(m.data(), meta_len);
    if (!is) fail(ErrorCategory::Format, "tensor container: truncated metadata");
    a.meta = nlohmann::json::parse(m);
    const auto count = io::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = io::read_pod<std::uint32_t>(is);
      std::string name(name_len, '\0');
      is.read(name.data(), name_len);
      Tensor t;
      const auto rank = io::read_pod<std::uint32_t>(is);
      std::size_t n = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        t.shape.push_back(io::read_pod<std::uint32_t>(is));
        n *= t.shape.back();
      }
      t.values.resize(n);
      is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(float)));
      if (!is) fail(ErrorCategory::Format, "tensor container: truncated tensor '" + name + "'");
      a.tensors_[name] = std::move(t);
    }
    return a;
  }

  void save(const std::filesystem::path& p) const {
    auto f = io::open_out(p, std::ios::binary);
    write(f);
  }

  static TensorArchive load(const std::filesystem::path& p) {
    auto f = io::open_in(p, std::ios::binary);
    return read(f);
  }

 private:
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) fail(ErrorCategory::Format, "missing tensor '" + name + "'");
    return it->second;
  }

  std::map<std::string, Tensor> tensors_;
};

}  // namespace biloop
