#pragma once

// Independent reference implementations used by the tests. They follow the
// defining formulas with plain loops and rotation matrices and share no code
// paths with the library beyond its plain data types.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "biloop/geometry.hpp"

namespace oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr double kPi = std::numbers::pi;

/// Rotation matrix from (w, x, y, z) written out element by element.
inline Eigen::Matrix3d rotation(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n, x /= n, y /= n, z /= n;
  Eigen::Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

inline Eigen::Matrix3d rotation(const biloop::Quat& q) { return rotation(q.w(), q.x(), q.y(), q.z()); }

inline Eigen::Matrix4d homogeneous(const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  Eigen::Matrix4d T = Eigen::Matrix4d::Zero();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) T(r, c) = R(r, c);
    T(r, 3) = t(r);
  }
  T(3, 3) = 1.0;
  return T;
}

/// Rotation angle of a rotation matrix, degrees.
inline double rotation_angle_deg(const Eigen::Matrix3d& R) {
  const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / kPi;
}

/// Pixel of a point given in camera-a coordinates seen from camera b, where
/// (R, t) is the pose of b in a. Returns false when behind camera b.
inline bool project(const biloop::CameraIntrinsics& K, const Eigen::Matrix3d& R, const Eigen::Vector3d& t,
                    const Eigen::Vector3d& w, Eigen::Vector2d& px) {
  const Eigen::Matrix4d T_ab = homogeneous(R, t);
  const Eigen::Matrix4d T_ba = T_ab.inverse();
  const Eigen::Vector4d pb = T_ba * Eigen::Vector4d(w.x(), w.y(), w.z(), 1.0);
  if (pb(2) <= 0.0) return false;
  Eigen::Matrix3d Km;
  Km << K.fx, 0, K.cx, 0, K.fy, K.cy, 0, 0, 1;
  const Eigen::Vector3d h = Km * pb.head<3>();
  px = Eigen::Vector2d(h(0) / h(2), h(1) / h(2));
  return true;
}

inline double reprojection_error(const std::vector<Eigen::Vector2d>& observed, const biloop::CameraIntrinsics& K,
                                 const Eigen::Matrix3d& R, const Eigen::Vector3d& t,
                                 const std::vector<Eigen::Vector3d>& world, double penalty = 1e6) {
  double e = 0.0;
  for (std::size_t i = 0; i < world.size(); ++i) {
    Eigen::Vector2d px;
    if (!project(K, R, t, world[i], px)) {
      e += penalty;
      continue;
    }
    const double du = observed[i](0) - px(0), dv = observed[i](1) - px(1);
    e += du * du + dv * dv;
  }
  return e;
}

/// Selection cone test written with rotation matrices: horizontal bearing
/// from the camera-frame offset, orientation difference from the trace.
inline bool in_view(const biloop::CameraPose& q, const biloop::CameraPose& c, double fov_deg, double d_min,
                    double d_max, double tol_deg, bool backward) {
  const Eigen::Vector3d d = c.t - q.t;
  const double dist = std::sqrt(d.dot(d));
  if (dist < d_min || dist > d_max) return false;
  const Eigen::Matrix3d Rq = rotation(q.q);
  const Eigen::Vector3d local = Rq.transpose() * d;
  if (local.z() <= 0.0) return false;
  const double bearing = std::atan(std::abs(local.x()) / local.z()) * 180.0 / kPi;
  if (bearing > fov_deg / 2.0) return false;
  Eigen::Matrix3d target = Rq;
  if (backward) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(0, 0) = -1.0;
    flip(2, 2) = -1.0;  // half-turn about camera y
    target = Rq * flip;
  }
  return rotation_angle_deg(target.transpose() * rotation(c.q)) <= tol_deg;
}

// ---------------------------------------------------------------------------
// VLAD by the defining sums

inline Vec normalize_or_zero(const Vec& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v(i) * v(i);
  s = std::sqrt(s);
  return s > 1e-12 ? Vec(v / s) : Vec(Vec::Zero(v.size()));
}

/// V(k, j) = sum_i a_k(x_i) (x_i(j) - c_k(j)), flattened row-major.
inline Vec flatten(const Mat& V) {
  Vec out(V.size());
  for (Eigen::Index k = 0; k < V.rows(); ++k) {
    for (Eigen::Index j = 0; j < V.cols(); ++j) out(k * V.cols() + j) = V(k, j);
  }
  return out;
}

inline Vec intra(const Mat& V) {
  Mat W = V;
  for (Eigen::Index k = 0; k < V.rows(); ++k) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < V.cols(); ++j) s += V(k, j) * V(k, j);
    s = std::sqrt(s);
    if (s > 1e-12) {
      for (Eigen::Index j = 0; j < V.cols(); ++j) W(k, j) /= s;
    }
  }
  return flatten(W);
}

inline Mat vlad_hard_raw(const Mat& X, const Mat& C) {
  const Eigen::Index N = X.rows(), K = C.rows(), D = C.cols();
  Mat V = Mat::Zero(K, D);
  for (Eigen::Index i = 0; i < N; ++i) {
    Eigen::Index best = 0;
    double best_d = 1e300;
    for (Eigen::Index k = 0; k < K; ++k) {
      double d = 0.0;
      for (Eigen::Index j = 0; j < D; ++j) d += (X(i, j) - C(k, j)) * (X(i, j) - C(k, j));
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    for (Eigen::Index j = 0; j < D; ++j) V(best, j) += X(i, j) - C(best, j);
  }
  return V;
}

inline Mat vlad_soft_raw(const Mat& X, const Mat& W, const Vec& b, const Mat& C) {
  const Eigen::Index N = X.rows(), K = C.rows(), D = C.cols();
  Mat V = Mat::Zero(K, D);
  for (Eigen::Index i = 0; i < N; ++i) {
    std::vector<double> logit(static_cast<std::size_t>(K));
    for (Eigen::Index k = 0; k < K; ++k) {
      double z = b(k);
      for (Eigen::Index j = 0; j < D; ++j) z += W(k, j) * X(i, j);
      logit[static_cast<std::size_t>(k)] = z;
    }
    double denom = 0.0;
    for (double z : logit) denom += std::exp(z);
    for (Eigen::Index k = 0; k < K; ++k) {
      const double a = std::exp(logit[static_cast<std::size_t>(k)]) / denom;
      for (Eigen::Index j = 0; j < D; ++j) V(k, j) += a * (X(i, j) - C(k, j));
    }
  }
  return V;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central difference of f with respect to every entry of `x` (modified in
/// place and restored).
template <typename Derived>
Vec numeric_gradient(Eigen::MatrixBase<Derived>& x, const std::function<double()>& f, double eps = 1e-5) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.derived().data()[i];
    x.derived().data()[i] = orig + eps;
    const double fp = f();
    x.derived().data()[i] = orig - eps;
    const double fm = f();
    x.derived().data()[i] = orig;
    g(i) = (fp - fm) / (2.0 * eps);
  }
  return g;
}

/// Largest per-component relative error |a - n| / max(|a|, |n|, floor).
inline double max_relative_error(const Vec& analytic, const Vec& numeric, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({std::abs(analytic(i)), std::abs(numeric(i)), floor});
    worst = std::max(worst, std::abs(analytic(i) - numeric(i)) / scale);
  }
  return worst;
}

template <typename Derived>
Vec as_vector(const Eigen::MatrixBase<Derived>& m) {
  Vec v(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) v(i) = m.derived().data()[i];
  return v;
}

// ---------------------------------------------------------------------------
// Precision / recall by confusion-matrix enumeration

struct Confusion {
  int tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(const std::vector<double>& scores, const std::vector<bool>& labels, double thr) {
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= thr;
    if (predicted && labels[i]) ++c.tp;
    if (predicted && !labels[i]) ++c.fp;
    if (!predicted && labels[i]) ++c.fn;
    if (!predicted && !labels[i]) ++c.tn;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Random helpers

inline biloop::Quat random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  biloop::Quat q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q;
}

inline Mat random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

}  // namespace oracle
