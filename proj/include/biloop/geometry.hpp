#pragma once

// Rigid-body pose algebra, pinhole projection and reprojection error.
//
// Conventions used throughout the library:
//   * quaternions are (w, x, y, z) and rotate camera coordinates into the
//     world frame (world-from-camera);
//   * canonical quaternions have w >= 0 (ties at w == 0 resolved so the first
//     non-zero vector component is positive);
//   * camera frame: +z along the optical axis, +x right, +y down.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "biloop/error.hpp"

namespace biloop {

using SampleId = std::int64_t;
using Quat = Eigen::Quaterniond;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Tolerance on |‖q‖ - 1| accepted for caller-provided quaternions.
inline constexpr double kUnitQuatTolerance = 1e-6;

inline constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline constexpr double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

enum class Direction { Forward, Backward };

inline std::string_view to_string(Direction d) {
  return d == Direction::Forward ? "forward" : "backward";
}

inline Direction direction_from_string(std::string_view s) {
  if (s == "forward") return Direction::Forward;
  if (s == "backward") return Direction::Backward;
  fail(ErrorCategory::Format, "unknown direction '" + std::string(s) + "'");
}

inline bool is_unit(const Quat& q, double tol = kUnitQuatTolerance) {
  return std::abs(q.norm() - 1.0) <= tol;
}

/// Normalizes and moves q onto the w >= 0 hemisphere.
inline Quat canonicalize(Quat q) {
  q.normalize();
  const auto flip = [&] {
    if (q.w() != 0.0) return q.w() < 0.0;
    for (double c : {q.x(), q.y(), q.z()}) {
      if (c != 0.0) return c < 0.0;
    }
    return false;
  }();
  if (flip) q.coeffs() = -q.coeffs();
  return q;
}

/// Rotation angle between two orientations, sign invariant, in degrees.
/// Uses atan2 on the relative quaternion so small angles stay accurate.
inline double angular_distance_deg(const Quat& a, const Quat& b) {
  const Quat d = a.conjugate() * b;
  const double s = d.vec().norm();
  const double c = std::abs(d.w());
  return rad2deg(2.0 * std::atan2(s, c));
}

/// Half-turn about the camera's vertical (y) axis.
inline Quat half_turn_about_camera_y() { return Quat(0.0, 0.0, 1.0, 0.0); }

struct CameraPose {
  Quat q = Quat::Identity();
  Vec3 t = Vec3::Zero();
  SampleId id = 0;
  std::optional<double> timestamp;

  /// Builds a pose with a canonical unit quaternion. Rejects quaternions that
  /// are not unit within kUnitQuatTolerance.
  static CameraPose make(const Quat& q, const Vec3& t, SampleId id = 0,
                         std::optional<double> timestamp = std::nullopt) {
    require(is_unit(q), "pose " + std::to_string(id) + ": quaternion is not unit-norm");
    return CameraPose{canonicalize(q), t, id, timestamp};
  }

  Mat3 rotation() const { return q.toRotationMatrix(); }
  Vec3 forward_axis() const { return q * Vec3::UnitZ(); }
};

/// Pose of camera b expressed in the frame of camera a.
struct RelativePose {
  Quat q = Quat::Identity();
  Vec3 t = Vec3::Zero();

  static RelativePose identity() { return {}; }
};

struct CameraIntrinsics {
  double fx = 320.0;
  double fy = 320.0;
  double cx = 320.0;
  double cy = 240.0;
  int width = 640;
  int height = 480;

  /// Horizontal field of view in degrees.
  double fov_deg() const { return rad2deg(2.0 * std::atan(0.5 * width / fx)); }

  void validate() const {
    require(fx > 0.0 && fy > 0.0, "intrinsics: focal lengths must be positive");
    require(width > 0 && height > 0, "intrinsics: image size must be positive");
    require(cx > 0.0 && cx < width && cy > 0.0 && cy < height,
            "intrinsics: principal point must lie inside the image");
  }

  bool contains(const Vec2& px) const {
    return px.x() >= 0.0 && px.x() < width && px.y() >= 0.0 && px.y() < height;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CameraIntrinsics, fx, fy, cx, cy, width, height)

/// [q, t] as a 4x4 homogeneous transform.
inline Mat4 to_homogeneous(const Quat& q, const Vec3& t) {
  Mat4 T = Mat4::Identity();
  T.topLeftCorner<3, 3>() = q.normalized().toRotationMatrix();
  T.topRightCorner<3, 1>() = t;
  return T;
}

inline Mat4 to_homogeneous(const CameraPose& p) { return to_homogeneous(p.q, p.t); }
inline Mat4 to_homogeneous(const RelativePose& r) { return to_homogeneous(r.q, r.t); }

/// T_a^-1 * T_b, i.e. the pose of b in the frame of a.
inline RelativePose compose_relative(const CameraPose& a, const CameraPose& b) {
  require(is_unit(a.q) && is_unit(b.q), "compose_relative: non-unit quaternion");
  const Quat qa = a.q.normalized();
  const Quat qb = b.q.normalized();
  RelativePose r;
  r.q = canonicalize(qa.conjugate() * qb);
  r.t = qa.conjugate() * (b.t - a.t);
  return r;
}

/// Applies a relative pose to a: returns T_a * T_rel.
inline CameraPose apply_relative(const CameraPose& a, const RelativePose& rel) {
  CameraPose b;
  b.q = canonicalize(a.q * rel.q);
  b.t = a.t + a.q * rel.t;
  return b;
}

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool behind = false;
};

/// Projects points expressed in the frame of camera a into camera b, where
/// rel is the pose of b in a. Points with depth <= 0 in b are flagged.
inline Projection project_point(const CameraIntrinsics& K, const RelativePose& rel,
                                const Vec3& point_a) {
  const Vec3 pb = rel.q.conjugate() * (point_a - rel.t);
  Projection p;
  p.depth = pb.z();
  if (!(pb.z() > 0.0)) {
    p.behind = true;
    return p;
  }
  p.pixel = Vec2(K.fx * pb.x() / pb.z() + K.cx, K.fy * pb.y() / pb.z() + K.cy);
  return p;
}

inline std::vector<Projection> project(const CameraIntrinsics& K, const RelativePose& rel,
                                       std::span<const Vec3> points) {
  std::vector<Projection> out;
  out.reserve(points.size());
  for (const auto& w : points) out.push_back(project_point(K, rel, w));
  return out;
}

/// Homogeneous overload: columns are (X, Y, Z, W) with W != 0.
inline std::vector<Projection> project(const CameraIntrinsics& K, const RelativePose& rel,
                                       const Eigen::Matrix4Xd& points) {
  std::vector<Vec3> euclid;
  euclid.reserve(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    require(points(3, i) != 0.0, "project: homogeneous point at infinity");
    euclid.push_back(points.col(i).head<3>() / points(3, i));
  }
  return project(K, rel, euclid);
}

/// Back-projects a pixel at a known depth into camera coordinates.
inline Vec3 unproject(const CameraIntrinsics& K, const Vec2& pixel, double depth) {
  return Vec3((pixel.x() - K.cx) / K.fx * depth, (pixel.y() - K.cy) / K.fy * depth, depth);
}

struct ReprojectionResult {
  double error = 0.0;            // cumulative squared pixel error
  std::size_t behind_count = 0;  // points that landed behind camera b
};

/// Cumulative squared reprojection error of world points W (frame a) against
/// observed pixels P in camera b, for the relative pose (q, t) of b in a.
/// Behind-camera points add `behind_penalty` each and are counted.
inline ReprojectionResult reprojection_error(std::span<const Vec2> observed,
                                             const CameraIntrinsics& K, const Quat& q,
                                             const Vec3& t, std::span<const Vec3> world,
                                             double behind_penalty = 1e6) {
  require(!observed.empty(), "reprojection_error: empty correspondence set");
  require(observed.size() == world.size(),
          "reprojection_error: observed and world point counts differ");
  const RelativePose rel{q.normalized(), t};
  ReprojectionResult r;
  for (std::size_t i = 0; i < world.size(); ++i) {
    const auto p = project_point(K, rel, world[i]);
    if (p.behind) {
      r.error += behind_penalty;
      ++r.behind_count;
    } else {
      r.error += (observed[i] - p.pixel).squaredNorm();
    }
  }
  return r;
}

/// Selection cone for positive samples around a query pose.
struct ViewCone {
  double fov_deg = 90.0;
  double d_min = 2.0;
  double d_max = 11.0;
  double orient_tol_deg = 30.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ViewCone, fov_deg, d_min, d_max, orient_tol_deg)

/// True iff `candidate` lies inside the query's horizontal field of view at a
/// distance in [d_min, d_max] and is oriented like the query (forward) or
/// like the half-turned query (backward).
inline bool in_view(const CameraPose& query, const CameraPose& candidate, const ViewCone& cone,
                    Direction mode) {
  const Vec3 delta = candidate.t - query.t;
  const double dist = delta.norm();
  if (dist < cone.d_min || dist > cone.d_max) return false;

  const Vec3 local = query.q.conjugate() * delta;
  if (!(local.z() > 0.0)) return false;
  const double bearing = rad2deg(std::atan2(std::abs(local.x()), local.z()));
  if (bearing > 0.5 * cone.fov_deg) return false;

  const Quat target =
      mode == Direction::Forward ? query.q : Quat(query.q * half_turn_about_camera_y());
  return angular_distance_deg(target, candidate.q) <= cone.orient_tol_deg;
}

/// Heading of the camera's optical axis in the world x-y plane, radians.
inline double heading(const CameraPose& p) {
  const Vec3 f = p.forward_axis();
  return std::atan2(f.y(), f.x());
}

/// World-from-camera orientation for a camera at height looking along the
/// world-frame heading (z up), with the image y axis pointing down.
inline Quat orientation_from_heading(double heading_rad) {
  Mat3 R;
  const double c = std::cos(heading_rad), s = std::sin(heading_rad);
  R.col(0) = Vec3(s, -c, 0.0);   // camera x: right
  R.col(1) = Vec3(0.0, 0.0, -1.0);  // camera y: down
  R.col(2) = Vec3(c, s, 0.0);    // camera z: forward
  return canonicalize(Quat(R));
}

}  // namespace biloop
