#pragma once

// Local-descriptor backends. A backend turns a sample into an N x D matrix
// of local descriptors; the aggregation layers do not care where they come
// from. Two backends ship:
//   * Passthrough: the sample already carries descriptors (synthetic worlds,
//     externally extracted features);
//   * Conv: one trainable convolution over a grayscale image grid, leaky
//     rectifier, per-location L2 normalization.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <variant>

#include "biloop/descriptors.hpp"
#include "biloop/error.hpp"
#include "biloop/io_util.hpp"
#include "biloop/rng.hpp"

namespace biloop {

/// Grayscale image with intensities in [0, 1].
struct Image {
  Matrix pixels;  // rows x cols

  Eigen::Index rows() const { return pixels.rows(); }
  Eigen::Index cols() const { return pixels.cols(); }
};

/// Reads binary (P5) or ASCII (P2) PGM files, 8 or 16 bit.
inline Image read_pgm(const std::filesystem::path& path) {
  auto f = io::open_in(path, std::ios::binary);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P2") fail(ErrorCategory::Format, path.string() + ": not a PGM file");
  const auto next_int = [&] {
    int v = 0;
    while (true) {
      f >> std::ws;
      if (f.peek() == '#') {
        std::string skip;
        std::getline(f, skip);
        continue;
      }
      if (!(f >> v)) fail(ErrorCategory::Format, path.string() + ": malformed PGM header");
      return v;
    }
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    fail(ErrorCategory::Format, path.string() + ": invalid PGM dimensions");
  }
  Image img{Matrix(h, w)};
  if (magic == "P2") {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) img.pixels(r, c) = double(next_int()) / maxval;
    return img;
  }
  f.get();  // single whitespace after maxval
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      int v;
      if (maxval < 256) {
        v = f.get();
      } else {
        const int hi = f.get(), lo = f.get();
        v = (hi << 8) | lo;
      }
      if (!f) fail(ErrorCategory::Format, path.string() + ": truncated PGM data");
      img.pixels(r, c) = double(v) / maxval;
    }
  }
  return img;
}

/// One observation fed to a backend.
struct Sample {
  SampleId id = 0;
  LocalDescriptorSet descriptors;
  std::optional<Image> image;
};

struct PassthroughBackend {
  int dim = 0;
};

struct ConvBackend {
  int dim = 0;           // output descriptor dimension D
  int patch = 5;         // square receptive field
  int stride = 4;
  double leak = 0.1;
  Matrix kernel;         // D x patch^2
  Vector bias;           // D

  static ConvBackend make(int dim, int patch, int stride, std::uint64_t seed) {
    require(dim >= 1 && patch >= 1 && stride >= 1, "conv backend: invalid configuration");
    ConvBackend b;
    b.dim = dim;
    b.patch = patch;
    b.stride = stride;
    Rng rng = make_rng(seed, "conv_backend");
    std::normal_distribution<double> g(0.0, std::sqrt(2.0 / (patch * patch)));
    b.kernel.resize(dim, patch * patch);
    for (Eigen::Index i = 0; i < b.kernel.size(); ++i) b.kernel.data()[i] = g(rng);
    b.bias = Vector::Zero(dim);
    return b;
  }
};

struct ConvCache {
  Matrix patches;  // N x patch^2
  Matrix pre;      // N x D before activation
  Matrix act;      // N x D after activation
  Vector norms;    // N
};

struct BackendGradients {
  Matrix kernel;
  Vector bias;

  void add(const BackendGradients& o) {
    if (o.kernel.size() == 0) return;
    if (kernel.size() == 0) {
      *this = o;
      return;
    }
    kernel += o.kernel;
    bias += o.bias;
  }
  void scale(double s) {
    kernel *= s;
    bias *= s;
  }
};

class Backend {
 public:
  Backend() = default;
  explicit Backend(PassthroughBackend p) : impl_(p) {}
  explicit Backend(ConvBackend c) : impl_(std::move(c)) {}

  std::string kind() const {
    return std::holds_alternative<PassthroughBackend>(impl_) ? "passthrough" : "conv";
  }
  bool trainable() const { return std::holds_alternative<ConvBackend>(impl_); }
  int descriptor_dim() const {
    return std::visit([](const auto& b) { return b.dim; }, impl_);
  }
  ConvBackend* conv() { return std::get_if<ConvBackend>(&impl_); }
  const ConvBackend* conv() const { return std::get_if<ConvBackend>(&impl_); }

  /// Local descriptors for a sample; fills `cache` for trainable backends.
  LocalDescriptorSet extract(const Sample& s, ConvCache* cache = nullptr) const {
    if (const auto* c = conv()) return conv_forward(*c, s, cache);
    const auto& p = std::get<PassthroughBackend>(impl_);
    if (s.descriptors.empty()) {
      fail(ErrorCategory::EmptyInput,
           "sample " + std::to_string(s.id) + " has no descriptors");
    }
    require(p.dim == 0 || s.descriptors.dim() == p.dim,
            "sample " + std::to_string(s.id) + ": descriptor dimension mismatch");
    LocalDescriptorSet out = s.descriptors;
    out.source_id = s.id;
    return out;
  }

  /// Accumulates parameter gradients given dLoss/d(descriptors).
  void backward(const ConvCache& cache, const Matrix& d_desc, BackendGradients& out) const {
    const auto* c = conv();
    if (!c) return;
    Matrix dA = Matrix::Zero(cache.act.rows(), cache.act.cols());
    for (Eigen::Index i = 0; i < cache.act.rows(); ++i) {
      const double n = cache.norms(i);
      if (n <= kNormFloor) continue;
      const Eigen::RowVectorXd y = cache.act.row(i) / n;
      dA.row(i) = (d_desc.row(i) - y * y.dot(d_desc.row(i))) / n;
    }
    const Matrix dZ = (cache.pre.array() > 0.0).select(dA, c->leak * dA);
    BackendGradients g{dZ.transpose() * cache.patches, dZ.colwise().sum().transpose()};
    out.add(g);
  }

 private:
  static constexpr double kNormFloor = 1e-12;

  static LocalDescriptorSet conv_forward(const ConvBackend& c, const Sample& s, ConvCache* cache) {
    if (!s.image) {
      fail(ErrorCategory::EmptyInput, "sample " + std::to_string(s.id) + " has no image");
    }
    const Matrix& img = s.image->pixels;
    const int P = c.patch;
    if (img.rows() < P || img.cols() < P) {
      fail(ErrorCategory::EmptyInput,
           "sample " + std::to_string(s.id) + ": image smaller than the receptive field");
    }
    const Eigen::Index rows = (img.rows() - P) / c.stride + 1;
    const Eigen::Index cols = (img.cols() - P) / c.stride + 1;
    Matrix patches(rows * cols, P * P);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index q = 0; q < cols; ++q) {
        const auto blk = img.block(r * c.stride, q * c.stride, P, P);
        for (int a = 0; a < P; ++a)
          for (int b = 0; b < P; ++b) patches(r * cols + q, a * P + b) = blk(a, b);
      }
    }
    Matrix pre = patches * c.kernel.transpose();
    pre.rowwise() += c.bias.transpose();
    Matrix act = (pre.array() > 0.0).select(pre, c.leak * pre);
    Vector norms = act.rowwise().norm();
    Matrix out = act;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      if (norms(i) > kNormFloor) out.row(i) /= norms(i);
      else out.row(i).setZero();
    }
    if (cache) *cache = ConvCache{std::move(patches), std::move(pre), std::move(act), std::move(norms)};
    return LocalDescriptorSet{std::move(out), s.id};
  }

  std::variant<PassthroughBackend, ConvBackend> impl_;
};

}  // namespace biloop
