#pragma once

// LocalDescriptorSet and its binary file format:
//   int32 N, int32 D (little endian), then N*D float32 values, row major.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "biloop/geometry.hpp"
#include "biloop/io_util.hpp"

namespace biloop {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// N local descriptors of dimension D, one per row.
struct LocalDescriptorSet {
  Matrix descriptors;
  SampleId source_id = 0;

  Eigen::Index count() const { return descriptors.rows(); }
  Eigen::Index dim() const { return descriptors.cols(); }
  bool empty() const { return descriptors.rows() == 0; }
};

inline void write_descriptors(std::ostream& os, const LocalDescriptorSet& set) {
  const auto n = static_cast<std::int32_t>(set.count());
  const auto d = static_cast<std::int32_t>(set.dim());
  io::write_pod(os, n);
  io::write_pod(os, d);
  const RowMatrixF f = set.descriptors.cast<float>();
  os.write(reinterpret_cast<const char*>(f.data()),
           static_cast<std::streamsize>(sizeof(float) * f.size()));
}

inline LocalDescriptorSet read_descriptors(std::istream& is, SampleId id = 0) {
  const auto n = io::read_pod<std::int32_t>(is);
  const auto d = io::read_pod<std::int32_t>(is);
  if (n < 0 || d < 0) fail(ErrorCategory::Format, "descriptor file: negative dimensions");
  RowMatrixF f(n, d);
  is.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(sizeof(float) * f.size()));
  if (!is) fail(ErrorCategory::Format, "descriptor file: truncated payload");
  return LocalDescriptorSet{f.cast<double>(), id};
}

inline void write_descriptors(const std::filesystem::path& p, const LocalDescriptorSet& set) {
  auto f = io::open_out(p, std::ios::binary);
  write_descriptors(f, set);
}

inline LocalDescriptorSet read_descriptors(const std::filesystem::path& p, SampleId id = 0) {
  auto f = io::open_in(p, std::ios::binary);
  return read_descriptors(f, id);
}

}  // namespace biloop
