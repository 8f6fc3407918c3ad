#pragma once

// Triplet mining for forward and backward loop-closure training.
//
// For every query pose, positives are the poses inside the query's selection
// cone (field of view, distance window, orientation tolerance; the backward
// cone expects the candidate to face the query). Negatives are drawn
// uniformly from poses that fail the cone and lie farther than
// negative_min_dist. Forward triplets can additionally be screened by the
// cumulative reprojection error of tracked points.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "biloop/dataset.hpp"
#include "biloop/geometry.hpp"
#include "biloop/io_util.hpp"
#include "biloop/rng.hpp"

namespace biloop {

struct MiningConfig {
  double d_min = 2.0;
  double d_max = 11.0;
  double fov_deg = 0.0;  // <= 0: use the intrinsics' horizontal field of view
  double orient_tol_deg = 30.0;
  int triplets_per_query = 6;
  double negative_min_dist = 25.0;
  bool validate_reprojection = true;
  double reproj_rms_px = 2.0;       // per-point budget used when threshold <= 0
  double reproj_threshold = 0.0;    // cumulative squared pixels; <= 0: 4 * n for 2 px
  int min_track_points = 1;

  void validate() const {
    require(d_min > 0.0 && d_min < d_max, "mining: need 0 < d_min < d_max");
    require(triplets_per_query >= 1, "mining: triplets_per_query must be >= 1");
    require(orient_tol_deg >= 0.0, "mining: orientation tolerance must be non-negative");
  }

  ViewCone cone(const CameraIntrinsics& K) const {
    return ViewCone{fov_deg > 0.0 ? fov_deg : K.fov_deg(), d_min, d_max, orient_tol_deg};
  }

  double threshold_for(std::size_t points) const {
    return reproj_threshold > 0.0 ? reproj_threshold
                                  : reproj_rms_px * reproj_rms_px * static_cast<double>(points);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MiningConfig, d_min, d_max, fov_deg, orient_tol_deg,
                                                triplets_per_query, negative_min_dist,
                                                validate_reprojection, reproj_rms_px,
                                                reproj_threshold, min_track_points)

struct Triplet {
  SampleId anchor = 0;
  SampleId positive = 0;
  SampleId negative = 0;
  RelativePose rel;  // anchor -> positive
  Direction direction = Direction::Forward;
};

struct MiningStats {
  std::size_t queries = 0;
  std::size_t skipped_no_positive = 0;
  std::size_t skipped_no_negative = 0;
  std::size_t discarded_reprojection = 0;
  std::size_t validated = 0;
  std::size_t dropped_no_observation = 0;  // triplets touching a sample with no descriptors
};

struct MiningResult {
  std::vector<Triplet> triplets;
  MiningStats stats;
  std::vector<SampleId> skipped;  // queries without a usable positive/negative
};

/// Uniform horizontal grid over pose positions for radius queries.
class PoseGrid {
 public:
  PoseGrid(std::span<const CameraPose> poses, double cell) : poses_(poses), cell_(cell) {
    require(cell > 0.0, "pose grid: cell size must be positive");
    for (std::size_t i = 0; i < poses.size(); ++i) cells_[key(cell_of(poses[i].t.x()), cell_of(poses[i].t.y()))].push_back(i);
  }

  /// Indices of poses within `radius` (3-D distance) of `center`, ascending.
  std::vector<std::size_t> within(const Vec3& center, double radius) const {
    std::vector<std::size_t> out;
    const auto x0 = cell_of(center.x() - radius), x1 = cell_of(center.x() + radius);
    const auto y0 = cell_of(center.y() - radius), y1 = cell_of(center.y() + radius);
    for (auto cx = x0; cx <= x1; ++cx) {
      for (auto cy = y0; cy <= y1; ++cy) {
        auto it = cells_.find(key(cx, cy));
        if (it == cells_.end()) continue;
        for (auto i : it->second) {
          if ((poses_[i].t - center).norm() <= radius) out.push_back(i);
        }
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::int64_t cell_of(double v) const { return static_cast<std::int64_t>(std::floor(v / cell_)); }
  static std::uint64_t key(std::int64_t a, std::int64_t b) {
    return (static_cast<std::uint64_t>(a) << 32) ^ (static_cast<std::uint64_t>(b) & 0xffffffffull);
  }

  std::span<const CameraPose> poses_;
  double cell_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

/// Poses passing the selection cone of query `qi`, via the grid.
inline std::vector<std::size_t> positive_candidates(std::span<const CameraPose> poses,
                                                    const PoseGrid& grid, std::size_t qi,
                                                    const ViewCone& cone, Direction mode) {
  std::vector<std::size_t> out;
  for (auto j : grid.within(poses[qi].t, cone.d_max)) {
    if (j != qi && in_view(poses[qi], poses[j], cone, mode)) out.push_back(j);
  }
  return out;
}

inline bool is_negative(std::span<const CameraPose> poses, std::size_t qi, std::size_t j,
                        const ViewCone& cone, Direction mode, double negative_min_dist) {
  return j != qi && (poses[j].t - poses[qi].t).norm() > negative_min_dist &&
         !in_view(poses[qi], poses[j], cone, mode);
}

/// Picks up to triplets_per_query positives (all of them when fewer exist)
/// and one uniformly drawn negative for each. Returns nothing when no
/// negative exists.
inline std::vector<Triplet> select_triplets(std::span<const CameraPose> poses, std::size_t qi,
                                            std::vector<std::size_t> positives,
                                            const MiningConfig& cfg, const ViewCone& cone,
                                            Direction mode, Rng& rng) {
  std::vector<Triplet> out;
  if (positives.empty()) return out;
  const auto k = static_cast<std::size_t>(cfg.triplets_per_query);
  if (positives.size() > k) {
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, positives.size() - 1);
      std::swap(positives[i], positives[pick(rng)]);
    }
    positives.resize(k);
    std::sort(positives.begin(), positives.end());
  }

  std::vector<std::size_t> eligible;  // filled lazily if rejection sampling stalls
  bool enumerated = false;
  std::uniform_int_distribution<std::size_t> any(0, poses.size() - 1);
  for (auto pj : positives) {
    std::size_t neg = poses.size();
    for (int attempt = 0; attempt < 64; ++attempt) {
      const auto j = any(rng);
      if (is_negative(poses, qi, j, cone, mode, cfg.negative_min_dist)) {
        neg = j;
        break;
      }
    }
    if (neg == poses.size()) {
      if (!enumerated) {
        for (std::size_t j = 0; j < poses.size(); ++j) {
          if (is_negative(poses, qi, j, cone, mode, cfg.negative_min_dist)) eligible.push_back(j);
        }
        enumerated = true;
      }
      if (eligible.empty()) return {};
      std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
      neg = eligible[pick(rng)];
    }
    out.push_back(Triplet{poses[qi].id, poses[pj].id, poses[neg].id,
                          compose_relative(poses[qi], poses[pj]), mode});
  }
  return out;
}

inline Rng mining_rng(std::uint64_t seed, Direction mode, SampleId query) {
  return make_rng(seed, mode == Direction::Forward ? "mine_forward" : "mine_backward",
                  static_cast<std::uint64_t>(query));
}

/// Geometric mining over all poses of a sequence (no reprojection screening).
inline MiningResult mine_triplets(std::span<const CameraPose> poses, const CameraIntrinsics& K,
                                  const MiningConfig& cfg, Direction mode, std::uint64_t seed) {
  cfg.validate();
  require(poses.size() >= 3, "mining: need at least 3 poses");
  const ViewCone cone = cfg.cone(K);
  const PoseGrid grid(poses, cone.d_max);
  MiningResult r;
  for (std::size_t qi = 0; qi < poses.size(); ++qi) {
    ++r.stats.queries;
    auto pos = positive_candidates(poses, grid, qi, cone, mode);
    if (pos.empty()) {
      ++r.stats.skipped_no_positive;
      r.skipped.push_back(poses[qi].id);
      continue;
    }
    Rng rng = mining_rng(seed, mode, poses[qi].id);
    auto ts = select_triplets(poses, qi, std::move(pos), cfg, cone, mode, rng);
    if (ts.empty()) {
      ++r.stats.skipped_no_negative;
      r.skipped.push_back(poses[qi].id);
      continue;
    }
    r.triplets.insert(r.triplets.end(), ts.begin(), ts.end());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reprojection screening

enum class ReprojectionReason { Keep, ExceedsThreshold, NoCorrespondences, BackwardUnsupported };

inline std::string_view to_string(ReprojectionReason r) {
  switch (r) {
    case ReprojectionReason::Keep: return "keep";
    case ReprojectionReason::ExceedsThreshold: return "exceeds-threshold";
    case ReprojectionReason::NoCorrespondences: return "no-correspondences";
    case ReprojectionReason::BackwardUnsupported: return "backward-unsupported";
  }
  return "unknown";
}

struct ReprojectionVerdict {
  bool keep = false;
  ReprojectionReason reason = ReprojectionReason::NoCorrespondences;
  double error = 0.0;
  std::size_t points = 0;
};

/// Keeps a forward triplet iff the cumulative squared reprojection error of
/// the anchor's 3-D points (anchor frame) against the positive's tracked
/// pixels, through the triplet's relative pose, is within `threshold`.
inline ReprojectionVerdict validate_triplet_reprojection(const Triplet& t,
                                                         std::span<const Vec3> world_in_anchor,
                                                         std::span<const Vec2> tracked_in_positive,
                                                         const CameraIntrinsics& K,
                                                         double threshold) {
  ReprojectionVerdict v;
  if (t.direction == Direction::Backward) {
    v.reason = ReprojectionReason::BackwardUnsupported;
    return v;
  }
  require(world_in_anchor.size() == tracked_in_positive.size(),
          "reprojection screening: point sets are not index aligned");
  v.points = world_in_anchor.size();
  if (world_in_anchor.empty()) return v;
  v.error = reprojection_error(tracked_in_positive, K, t.rel.q, t.rel.t, world_in_anchor).error;
  v.keep = v.error <= threshold;
  v.reason = v.keep ? ReprojectionReason::Keep : ReprojectionReason::ExceedsThreshold;
  return v;
}

struct Correspondences {
  std::vector<Vec3> world_in_anchor;
  std::vector<Vec2> tracked_in_positive;
};

/// Landmarks tracked in both anchor and positive: 3-D positions in the
/// anchor frame and pixel positions in the positive.
inline Correspondences track_correspondences(const SequenceDataset& ds, SampleId anchor,
                                             SampleId positive) {
  Correspondences c;
  if (ds.tracks.empty() || ds.landmarks.empty()) return c;
  const auto ia = ds.index_of(anchor), ip = ds.index_of(positive);
  const auto& ta = ds.tracks[ia];
  const auto& tp = ds.tracks[ip];
  const CameraPose& pa = ds.poses[ia];
  std::size_t i = 0, j = 0;
  while (i < ta.landmark_ids.size() && j < tp.landmark_ids.size()) {
    if (ta.landmark_ids[i] < tp.landmark_ids[j]) {
      ++i;
    } else if (ta.landmark_ids[i] > tp.landmark_ids[j]) {
      ++j;
    } else {
      const auto lid = static_cast<std::size_t>(ta.landmark_ids[i]);
      if (lid < ds.landmarks.size() && ds.landmarks[lid].id == ta.landmark_ids[i]) {
        c.world_in_anchor.push_back(pa.q.conjugate() * (ds.landmarks[lid].position - pa.t));
        c.tracked_in_positive.push_back(tp.pixels[j]);
      }
      ++i;
      ++j;
    }
  }
  return c;
}

/// Full mining for a dataset: geometric selection, removal of triplets that
/// touch unobserved samples, then reprojection screening of forward triplets
/// when tracks and landmarks are available.
inline MiningResult mine_triplets(const SequenceDataset& ds, const MiningConfig& cfg,
                                  Direction mode, std::uint64_t seed) {
  auto r = mine_triplets(std::span<const CameraPose>(ds.poses), ds.intrinsics, cfg, mode, seed);
  if (!ds.samples.empty()) {
    const auto observed = [&ds](SampleId id) {
      const auto& s = ds.samples[ds.index_of(id)];
      return !s.descriptors.empty() || s.image.has_value();
    };
    std::erase_if(r.triplets, [&](const Triplet& t) {
      const bool drop = !observed(t.anchor) || !observed(t.positive) || !observed(t.negative);
      r.stats.dropped_no_observation += drop ? 1 : 0;
      return drop;
    });
  }
  const bool can_validate = cfg.validate_reprojection && mode == Direction::Forward &&
                            !ds.tracks.empty() && !ds.landmarks.empty();
  if (!can_validate) return r;
  std::vector<Triplet> kept;
  kept.reserve(r.triplets.size());
  for (const auto& t : r.triplets) {
    const auto c = track_correspondences(ds, t.anchor, t.positive);
    ++r.stats.validated;
    const auto n = c.world_in_anchor.size();
    const bool enough = static_cast<int>(n) >= cfg.min_track_points;
    const auto v = enough ? validate_triplet_reprojection(t, c.world_in_anchor, c.tracked_in_positive,
                                                          ds.intrinsics, cfg.threshold_for(n))
                          : ReprojectionVerdict{};
    if (v.keep) {
      kept.push_back(t);
    } else {
      ++r.stats.discarded_reprojection;
    }
  }
  r.triplets = std::move(kept);
  return r;
}

// ---------------------------------------------------------------------------
// Manifest: "anchor positive negative qw qx qy qz tx ty tz direction"

inline constexpr int kManifestVersion = 1;

inline void write_manifest(std::ostream& os, const std::vector<Triplet>& ts) {
  io::write_header(os, "manifest", kManifestVersion);
  os << "# anchor_id positive_id negative_id qw qx qy qz tx ty tz direction\n";
  for (const auto& t : ts) {
    os << t.anchor << ' ' << t.positive << ' ' << t.negative << ' ' << t.rel.q.w() << ' '
       << t.rel.q.x() << ' ' << t.rel.q.y() << ' ' << t.rel.q.z() << ' ' << t.rel.t.x() << ' '
       << t.rel.t.y() << ' ' << t.rel.t.z() << ' ' << to_string(t.direction) << '\n';
  }
}

inline std::vector<Triplet> read_manifest(std::istream& is) {
  io::expect_header(is, "manifest", kManifestVersion);
  std::vector<Triplet> ts;
  std::string line;
  while (std::getline(is, line)) {
    const auto body = io::strip_comment(line);
    if (body.empty()) continue;
    std::istringstream ls{std::string(body)};
    Triplet t;
    double qw, qx, qy, qz, tx, ty, tz;
    std::string dir;
    if (!(ls >> t.anchor >> t.positive >> t.negative >> qw >> qx >> qy >> qz >> tx >> ty >> tz >> dir)) {
      fail(ErrorCategory::Format, "manifest: malformed line '" + line + "'");
    }
    t.rel = RelativePose{Quat(qw, qx, qy, qz), Vec3(tx, ty, tz)};
    t.direction = direction_from_string(dir);
    ts.push_back(t);
  }
  return ts;
}

inline void write_manifest(const std::filesystem::path& p, const std::vector<Triplet>& ts) {
  auto f = io::open_out(p);
  write_manifest(f, ts);
}

inline std::vector<Triplet> read_manifest(const std::filesystem::path& p) {
  auto f = io::open_in(p);
  return read_manifest(f);
}

}  // namespace biloop
