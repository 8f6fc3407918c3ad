#pragma once

// Synthetic out-and-back world: a trajectory traversed forward and then
// retraced backward, landmarks scattered along it, and a pinhole observer
// that turns visible landmarks into noisy local descriptors.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "biloop/descriptors.hpp"
#include "biloop/geometry.hpp"
#include "biloop/rng.hpp"

namespace biloop {

struct Landmark {
  std::int64_t id = 0;
  Vec3 position = Vec3::Zero();
  Vector signature;  // unit norm
};

struct TrajectorySpec {
  std::string shape = "straight";  // "straight" | "sine"
  double length = 100.0;           // meters, forward leg
  double spacing = 1.0;            // meters between consecutive poses
  double height = 1.5;             // camera height, meters
  double sine_amplitude = 0.0;     // lateral amplitude for "sine"
  double sine_wavelength = 50.0;
  double position_noise = 0.0;     // std-dev, meters, horizontal
  double yaw_noise_deg = 0.0;      // std-dev, degrees
  double speed = 1.0;              // m/s, drives timestamps
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrajectorySpec, shape, length, spacing, height,
                                                sine_amplitude, sine_wavelength, position_noise,
                                                yaw_noise_deg, speed)

struct Trajectory {
  std::vector<CameraPose> poses;
  std::vector<Direction> legs;
  std::vector<double> path_positions;  // cumulative traveled distance, meters
};

namespace detail {

inline Vec3 nominal_position(const TrajectorySpec& s, double along) {
  double y = 0.0;
  if (s.shape == "sine") {
    y = s.sine_amplitude * std::sin(2.0 * std::numbers::pi * along / s.sine_wavelength);
  }
  return Vec3(along, y, s.height);
}

inline double nominal_heading(const TrajectorySpec& s, double along) {
  if (s.shape != "sine") return 0.0;
  const double k = 2.0 * std::numbers::pi / s.sine_wavelength;
  return std::atan2(s.sine_amplitude * k * std::cos(k * along), 1.0);
}

}  // namespace detail

/// Out-and-back trajectory: n forward poses followed by n backward poses that
/// retrace the forward positions in reverse order with a half-turned heading.
inline Trajectory generate_trajectory(const TrajectorySpec& spec, std::uint64_t seed) {
  require(spec.spacing > 0.0, "trajectory: spacing must be positive");
  require(spec.length > 0.0, "trajectory: zero-length path");
  require(spec.shape == "straight" || spec.shape == "sine",
          "trajectory: unknown shape '" + spec.shape + "'");
  require(spec.shape != "sine" || spec.sine_wavelength > 0.0,
          "trajectory: sine wavelength must be positive");
  const auto n = static_cast<std::size_t>(std::llround(spec.length / spec.spacing));
  require(n >= 1, "trajectory: path shorter than one spacing");

  Rng rng = make_rng(seed, "trajectory");
  std::normal_distribution<double> pos_noise(0.0, 1.0);
  std::normal_distribution<double> yaw_noise(0.0, 1.0);

  std::vector<Vec3> nominal(n);
  std::vector<double> headings(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double along = static_cast<double>(i) * spec.spacing;
    nominal[i] = detail::nominal_position(spec, along);
    headings[i] = detail::nominal_heading(spec, along);
  }

  Trajectory traj;
  traj.poses.reserve(2 * n);
  const double dt = spec.spacing / spec.speed;
  double traveled = 0.0;
  const auto push = [&](const Vec3& p, double h, Direction leg, const Vec3* prev) {
    if (prev) traveled += (p - *prev).norm();
    Vec3 noisy = p;
    double yaw = h;
    if (spec.position_noise > 0.0) {
      noisy.x() += spec.position_noise * pos_noise(rng);
      noisy.y() += spec.position_noise * pos_noise(rng);
    }
    if (spec.yaw_noise_deg > 0.0) yaw += deg2rad(spec.yaw_noise_deg) * yaw_noise(rng);
    const auto id = static_cast<SampleId>(traj.poses.size());
    traj.poses.push_back(
        CameraPose{orientation_from_heading(yaw), noisy, id, static_cast<double>(id) * dt});
    traj.legs.push_back(leg);
    traj.path_positions.push_back(traveled);
  };

  for (std::size_t i = 0; i < n; ++i) {
    push(nominal[i], headings[i], Direction::Forward, i ? &nominal[i - 1] : nullptr);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t m = n - 1 - i;
    push(nominal[m], headings[m] + std::numbers::pi, Direction::Backward,
         &nominal[i ? m + 1 : n - 1]);
  }
  return traj;
}

struct LandmarkSpec {
  double density = 2.0;         // landmarks per meter of forward path
  double lateral_spread = 8.0;  // max lateral offset, meters
  double corridor = 1.0;        // min lateral offset (keeps the path clear)
  double height_min = 0.0;
  double height_max = 4.0;
  int dim = 32;                 // descriptor dimension D
  bool repetitive = false;      // draw signatures from a small pool
  int pool_size = 5;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LandmarkSpec, density, lateral_spread, corridor,
                                                height_min, height_max, dim, repetitive, pool_size)

inline Vector random_unit_vector(Rng& rng, int dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(dim);
  do {
    for (int j = 0; j < dim; ++j) v(j) = g(rng);
  } while (v.norm() == 0.0);
  return v.normalized();
}

/// Scatters landmarks along the forward leg of a trajectory.
inline std::vector<Landmark> generate_landmarks(const Trajectory& traj, const LandmarkSpec& spec,
                                                std::uint64_t seed) {
  require(spec.density > 0.0, "landmarks: density must be positive");
  require(spec.dim >= 1, "landmarks: descriptor dimension must be positive");
  require(spec.lateral_spread >= spec.corridor, "landmarks: spread smaller than corridor");
  require(!spec.repetitive || spec.pool_size >= 1, "landmarks: empty signature pool");

  std::vector<Vec3> path;
  for (std::size_t i = 0; i < traj.poses.size(); ++i) {
    if (traj.legs[i] == Direction::Forward) path.push_back(traj.poses[i].t);
  }
  require(!path.empty(), "landmarks: trajectory has no forward leg");
  std::vector<double> cum(path.size(), 0.0);
  for (std::size_t i = 1; i < path.size(); ++i) cum[i] = cum[i - 1] + (path[i] - path[i - 1]).norm();
  const double total = cum.back();
  const auto count = std::max<std::int64_t>(1, std::llround(spec.density * std::max(total, 1.0)));

  Rng rng = make_rng(seed, "landmarks");
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<Vector> pool;
  if (spec.repetitive) {
    for (int p = 0; p < spec.pool_size; ++p) pool.push_back(random_unit_vector(rng, spec.dim));
  }

  std::vector<Landmark> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t k = 0; k < count; ++k) {
    const double s = u01(rng) * total;
    const auto it = std::upper_bound(cum.begin(), cum.end(), s);
    const std::size_t hi = std::min<std::size_t>(
        static_cast<std::size_t>(std::distance(cum.begin(), it)), path.size() - 1);
    const std::size_t lo = hi == 0 ? 0 : hi - 1;
    const double seg = cum[hi] - cum[lo];
    const double a = seg > 0.0 ? (s - cum[lo]) / seg : 0.0;
    const Vec3 base = path[lo] + a * (path[hi] - path[lo]);
    Vec3 tangent = path.size() > 1 ? Vec3(path[hi] - path[lo]) : Vec3::UnitX();
    if (tangent.norm() == 0.0) tangent = Vec3::UnitX();
    tangent.z() = 0.0;
    tangent.normalize();
    const Vec3 normal(-tangent.y(), tangent.x(), 0.0);
    const double side = u01(rng) < 0.5 ? -1.0 : 1.0;
    const double offset = spec.corridor + u01(rng) * (spec.lateral_spread - spec.corridor);
    const double h = spec.height_min + u01(rng) * (spec.height_max - spec.height_min);

    Landmark lm;
    lm.id = k;
    lm.position = Vec3(base.x(), base.y(), 0.0) + side * offset * normal + Vec3(0, 0, h);
    if (spec.repetitive) {
      // The first pool_size landmarks cover the pool so every signature occurs.
      const auto idx = k < spec.pool_size
                           ? static_cast<std::size_t>(k)
                           : static_cast<std::size_t>(u01(rng) * spec.pool_size) %
                                 static_cast<std::size_t>(spec.pool_size);
      lm.signature = pool[idx];
    } else {
      lm.signature = random_unit_vector(rng, spec.dim);
    }
    out.push_back(std::move(lm));
  }
  return out;
}

struct ObserveSpec {
  double range = 15.0;            // max landmark distance, meters
  double descriptor_noise = 0.2;  // expected norm of the additive noise vector
  double pixel_noise = 0.0;       // std-dev of recorded pixel positions
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ObserveSpec, range, descriptor_noise, pixel_noise)

struct Observation {
  LocalDescriptorSet descriptors;
  std::vector<std::int64_t> landmark_ids;  // sorted ascending
  std::vector<Vec2> pixels;                // aligned with landmark_ids
  bool empty = true;
};

/// Landmarks geometrically visible from a pose: in front of the camera,
/// within range and projecting inside the image. Sorted ids.
inline std::vector<std::int64_t> visible_landmarks(const CameraPose& pose,
                                                   const std::vector<Landmark>& landmarks,
                                                   const CameraIntrinsics& K, double range) {
  std::vector<std::int64_t> ids;
  const RelativePose cam{pose.q, pose.t};
  for (const auto& lm : landmarks) {
    if ((lm.position - pose.t).norm() > range) continue;
    const auto p = project_point(K, cam, lm.position);
    if (p.behind || !K.contains(p.pixel)) continue;
    ids.push_back(lm.id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Noisy descriptors and pixel tracks of the landmarks visible from `pose`.
/// Deterministic in (seed, pose.id).
inline Observation observe(const CameraPose& pose, const std::vector<Landmark>& landmarks,
                           const CameraIntrinsics& K, const ObserveSpec& spec,
                           std::uint64_t seed) {
  require(spec.range > 0.0, "observe: range must be positive");
  Rng rng = make_rng(seed, "observe", static_cast<std::uint64_t>(pose.id));
  std::normal_distribution<double> g(0.0, 1.0);

  Observation obs;
  obs.descriptors.source_id = pose.id;
  const RelativePose cam{pose.q, pose.t};
  std::vector<const Landmark*> seen;
  for (const auto& lm : landmarks) {
    if ((lm.position - pose.t).norm() > spec.range) continue;
    const auto p = project_point(K, cam, lm.position);
    if (p.behind || !K.contains(p.pixel)) continue;
    seen.push_back(&lm);
    obs.pixels.push_back(p.pixel);
  }
  // landmarks are generated in id order, so `seen` is already sorted by id
  const int dim = landmarks.empty() ? 0 : static_cast<int>(landmarks.front().signature.size());
  obs.descriptors.descriptors.resize(static_cast<Eigen::Index>(seen.size()), dim);
  const double comp_sigma = dim > 0 ? spec.descriptor_noise / std::sqrt(double(dim)) : 0.0;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    Vector d = seen[i]->signature;
    if (comp_sigma > 0.0) {
      for (int j = 0; j < dim; ++j) d(j) += comp_sigma * g(rng);
    }
    const double nrm = d.norm();
    if (nrm > 0.0) d /= nrm;
    obs.descriptors.descriptors.row(static_cast<Eigen::Index>(i)) = d.transpose();
    obs.landmark_ids.push_back(seen[i]->id);
    if (spec.pixel_noise > 0.0) {
      obs.pixels[i] += Vec2(spec.pixel_noise * g(rng), spec.pixel_noise * g(rng));
    }
  }
  obs.empty = seen.empty();
  return obs;
}

/// Jaccard index of two sorted id sets.
inline double jaccard(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

}  // namespace biloop
