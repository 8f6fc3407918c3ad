#pragma once

// VLAD aggregation with hard nearest-centre assignment and its NetVLAD
// soft-assignment relaxation, plus the analytic backward pass of the soft
// form through the (optional) intra-normalization and the global L2
// normalization of the flattened output.
//
// Layout: V is K x D (one row per cluster); the flattened vector is row
// major, so element (k, j) lands at index k * D + j.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>

#include "biloop/descriptors.hpp"
#include "biloop/error.hpp"

namespace biloop {

/// Norm below which an aggregated vector is treated as all-zero.
inline constexpr double kDegenerateNorm = 1e-12;

struct VladParams {
  Matrix centers;  // K x D
  Matrix weights;  // K x D
  Vector biases;   // K

  Eigen::Index clusters() const { return centers.rows(); }
  Eigen::Index dim() const { return centers.cols(); }

  void validate() const {
    require(centers.rows() >= 1, "vlad: need at least one cluster");
    require(weights.rows() == centers.rows() && weights.cols() == centers.cols() &&
                biases.size() == centers.rows(),
            "vlad: inconsistent parameter shapes");
  }

  /// Soft-assignment parameters that approach hard assignment as alpha grows:
  /// w_k = 2 alpha c_k, b_k = -alpha |c_k|^2.
  static VladParams from_centers(const Matrix& centers, double alpha) {
    VladParams p;
    p.centers = centers;
    p.weights = 2.0 * alpha * centers;
    p.biases = -alpha * centers.rowwise().squaredNorm();
    return p;
  }
};

struct VladOptions {
  bool intra_normalize = false;
};

struct VladOutput {
  Matrix residuals;   // raw K x D aggregate
  Vector flat;        // normalized, flattened, length K * D
  bool degenerate = false;
};

namespace detail {

inline Vector flatten(const Matrix& V) {
  Vector out(V.size());
  for (Eigen::Index k = 0; k < V.rows(); ++k) out.segment(k * V.cols(), V.cols()) = V.row(k).transpose();
  return out;
}

inline Matrix unflatten(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  Matrix V(rows, cols);
  for (Eigen::Index k = 0; k < rows; ++k) V.row(k) = v.segment(k * cols, cols).transpose();
  return V;
}

inline void check_input(const LocalDescriptorSet& desc, Eigen::Index dim) {
  if (desc.empty()) {
    fail(ErrorCategory::EmptyInput,
         "vlad: sample " + std::to_string(desc.source_id) + " has no descriptors");
  }
  require(desc.dim() == dim, "vlad: descriptor dimension " + std::to_string(desc.dim()) +
                                 " does not match centres (" + std::to_string(dim) + ")");
}

struct Normalized {
  Matrix intra;        // V after optional per-cluster normalization
  Vector intra_norms;  // per-cluster norms (empty when disabled)
  Vector flat;
  double norm = 0.0;
  bool degenerate = false;
};

inline Normalized normalize(const Matrix& V, const VladOptions& opt) {
  Normalized n;
  n.intra = V;
  if (opt.intra_normalize) {
    n.intra_norms = V.rowwise().norm();
    for (Eigen::Index k = 0; k < V.rows(); ++k) {
      const double r = n.intra_norms(k);
      if (r > kDegenerateNorm) {
        n.intra.row(k) /= r;
      } else {
        n.intra.row(k).setZero();
      }
    }
  }
  n.flat = flatten(n.intra);
  n.norm = n.flat.norm();
  if (n.norm > kDegenerateNorm) {
    n.flat /= n.norm;
  } else {
    n.flat.setZero();
    n.degenerate = true;
  }
  return n;
}

}  // namespace detail

/// Hard-assignment VLAD. Ties go to the lowest cluster index.
inline VladOutput vlad_hard(const LocalDescriptorSet& desc, const Matrix& centers,
                            const VladOptions& opt = {}) {
  require(centers.rows() >= 1, "vlad: need at least one cluster");
  detail::check_input(desc, centers.cols());
  const Matrix& X = desc.descriptors;
  Matrix V = Matrix::Zero(centers.rows(), centers.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < centers.rows(); ++k) {
      const double d = (X.row(i) - centers.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    V.row(best) += X.row(i) - centers.row(best);
  }
  auto n = detail::normalize(V, opt);
  return VladOutput{std::move(V), std::move(n.flat), n.degenerate};
}

/// Row-wise softmax of w_k^T x_i + b_k (N x K), max-subtracted.
inline Matrix soft_assignment(const Matrix& X, const VladParams& p) {
  Matrix Z = X * p.weights.transpose();
  Z.rowwise() += p.biases.transpose();
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    const double mx = Z.row(i).maxCoeff();
    Z.row(i) = (Z.row(i).array() - mx).exp().matrix();
    Z.row(i) /= Z.row(i).sum();
  }
  return Z;
}

/// Intermediate values of the soft forward pass kept for the backward pass.
struct VladSoftCache {
  Matrix assignment;  // N x K
  Matrix residuals;   // raw K x D
  detail::Normalized normalized;

  const Vector& flat() const { return normalized.flat; }
  bool degenerate() const { return normalized.degenerate; }
};

inline VladSoftCache vlad_soft_forward(const LocalDescriptorSet& desc, const VladParams& p,
                                       const VladOptions& opt = {}) {
  p.validate();
  detail::check_input(desc, p.dim());
  const Matrix& X = desc.descriptors;
  VladSoftCache c;
  c.assignment = soft_assignment(X, p);
  const Vector mass = c.assignment.colwise().sum().transpose();
  c.residuals = c.assignment.transpose() * X - mass.asDiagonal() * p.centers;
  c.normalized = detail::normalize(c.residuals, opt);
  return c;
}

inline VladOutput vlad_soft(const LocalDescriptorSet& desc, const VladParams& p,
                            const VladOptions& opt = {}) {
  auto c = vlad_soft_forward(desc, p, opt);
  return VladOutput{std::move(c.residuals), std::move(c.normalized.flat), c.normalized.degenerate};
}

struct VladGradients {
  Matrix weights;      // K x D
  Vector biases;       // K
  Matrix centers;      // K x D
  Matrix descriptors;  // N x D
};

/// Gradients of a scalar loss with respect to the soft-VLAD parameters and
/// inputs, given dLoss/dflat for the normalized flattened output.
inline VladGradients vlad_soft_backward(const LocalDescriptorSet& desc, const VladParams& p,
                                        const VladOptions& opt, const VladSoftCache& c,
                                        const Vector& upstream) {
  const Matrix& X = desc.descriptors;
  const Eigen::Index K = p.clusters(), D = p.dim();
  require(upstream.size() == K * D, "vlad backward: upstream gradient has wrong size");

  VladGradients g;
  g.weights = Matrix::Zero(K, D);
  g.biases = Vector::Zero(K);
  g.centers = Matrix::Zero(K, D);
  g.descriptors = Matrix::Zero(X.rows(), D);
  if (c.normalized.degenerate) return g;

  // global L2 normalization
  const Vector& u = c.normalized.flat;
  const Vector dflat = (upstream - u * u.dot(upstream)) / c.normalized.norm;
  Matrix G = detail::unflatten(dflat, K, D);

  if (opt.intra_normalize) {
    for (Eigen::Index k = 0; k < K; ++k) {
      const double r = c.normalized.intra_norms(k);
      if (r > kDegenerateNorm) {
        const auto vk = c.normalized.intra.row(k);
        G.row(k) = (G.row(k) - vk * vk.dot(G.row(k))) / r;
      } else {
        G.row(k).setZero();
      }
    }
  }

  const Matrix& A = c.assignment;
  const Vector mass = A.colwise().sum().transpose();
  g.centers = -(mass.asDiagonal() * G);

  // s_ik = G_k . (x_i - c_k)
  Matrix S = X * G.transpose();
  const Vector gc = (G.array() * p.centers.array()).rowwise().sum();
  S.rowwise() -= gc.transpose();

  // softmax backward
  const Vector expected = (A.array() * S.array()).rowwise().sum();
  Matrix dZ = A.array() * (S.colwise() - expected).array();

  g.weights = dZ.transpose() * X;
  g.biases = dZ.colwise().sum().transpose();
  g.descriptors = A * G + dZ * p.weights;
  return g;
}

}  // namespace biloop
