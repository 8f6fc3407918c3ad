#pragma once

// SequenceDataset and its on-disk directory layout:
//
//   poses.txt              trajectory format (see trajectory_io.hpp)
//   legs.txt               "id leg path_position" per pose
//   config.json            intrinsics, visibility range, generator settings
//   descriptors/<id>.bin   local descriptors (see descriptors.hpp), optional
//   images/<id>.pgm        grayscale images for the conv backend, optional
//   tracks/<id>.txt        "landmark_id u v" pixel tracks, optional
//   landmarks.txt          "id x y z s_0 .. s_{D-1}", optional

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "biloop/backend.hpp"
#include "biloop/descriptors.hpp"
#include "biloop/geometry.hpp"
#include "biloop/io_util.hpp"
#include "biloop/rng.hpp"
#include "biloop/synthworld.hpp"
#include "biloop/trajectory_io.hpp"

namespace biloop {

struct Track {
  std::vector<std::int64_t> landmark_ids;  // sorted ascending
  std::vector<Vec2> pixels;
};

struct SequenceDataset {
  std::vector<CameraPose> poses;
  std::vector<Direction> legs;
  std::vector<double> path_positions;
  CameraIntrinsics intrinsics;
  std::vector<Sample> samples;       // aligned with poses
  std::vector<Track> tracks;         // empty, or aligned with poses
  std::vector<Landmark> landmarks;   // empty unless synthetic
  double visibility_range = 0.0;     // > 0 when ground-truth visibility is known
  std::vector<SampleId> aliased;     // samples whose observation shows another place

  std::size_t size() const { return poses.size(); }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < poses.size(); ++i) {
      if (!index_.emplace(poses[i].id, i).second) {
        fail(ErrorCategory::InvalidInput, "dataset: duplicate pose id " + std::to_string(poses[i].id));
      }
    }
  }

  std::size_t index_of(SampleId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) fail(ErrorCategory::InvalidInput, "dataset: unknown id " + std::to_string(id));
    return it->second;
  }

  bool has_ground_truth() const { return visibility_range > 0.0 && !landmarks.empty(); }

  /// Checks the structural invariants and rebuilds the id index.
  void validate() {
    intrinsics.validate();
    require(legs.size() == poses.size() && path_positions.size() == poses.size(),
            "dataset: legs/path positions not aligned with poses");
    require(samples.empty() || samples.size() == poses.size(),
            "dataset: observations not aligned with poses");
    require(tracks.empty() || tracks.size() == poses.size(), "dataset: tracks not aligned with poses");
    for (std::size_t i = 1; i < poses.size(); ++i) {
      require(poses[i].timestamp.value_or(0.0) > poses[i - 1].timestamp.value_or(0.0),
              "dataset: timestamps must be strictly increasing (pose " +
                  std::to_string(poses[i].id) + ")");
      require(path_positions[i] >= path_positions[i - 1],
              "dataset: path positions must be non-decreasing");
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
      require(samples[i].id == poses[i].id, "dataset: observation bound to the wrong pose");
    }
    reindex();
  }

  /// Landmark ids geometrically visible from each pose.
  std::vector<std::vector<std::int64_t>> ground_truth_visibility() const {
    require(has_ground_truth(), "dataset: no ground-truth landmarks",
            ErrorCategory::MissingDependency);
    std::vector<std::vector<std::int64_t>> vis;
    vis.reserve(poses.size());
    for (const auto& p : poses) vis.push_back(visible_landmarks(p, landmarks, intrinsics, visibility_range));
    return vis;
  }

 private:
  std::unordered_map<SampleId, std::size_t> index_;
};

/// Visual aliases: selected backward-leg observations replaced by a fresh
/// observation of a distant forward-leg place.
struct AliasSpec {
  int every = 0;             // 0 disables; otherwise every n-th backward pose
  int skip_first = 0;        // backward poses left untouched at the start
  double min_offset = 50.0;  // meters between the true and the aliased place
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AliasSpec, every, skip_first, min_offset)

struct WorldConfig {
  TrajectorySpec trajectory;
  LandmarkSpec landmarks;
  ObserveSpec observe;
  CameraIntrinsics intrinsics;
  AliasSpec aliases;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WorldConfig, trajectory, landmarks, observe,
                                                intrinsics, aliases)

inline SequenceDataset build_synthetic_dataset(const WorldConfig& cfg, std::uint64_t seed) {
  cfg.intrinsics.validate();
  auto traj = generate_trajectory(cfg.trajectory, seed);
  SequenceDataset ds;
  ds.landmarks = generate_landmarks(traj, cfg.landmarks, seed);
  ds.poses = std::move(traj.poses);
  ds.legs = std::move(traj.legs);
  ds.path_positions = std::move(traj.path_positions);
  ds.intrinsics = cfg.intrinsics;
  ds.visibility_range = cfg.observe.range;
  ds.samples.reserve(ds.poses.size());
  ds.tracks.reserve(ds.poses.size());
  for (const auto& p : ds.poses) {
    auto obs = observe(p, ds.landmarks, ds.intrinsics, cfg.observe, seed);
    ds.samples.push_back(Sample{p.id, std::move(obs.descriptors), std::nullopt});
    ds.tracks.push_back(Track{std::move(obs.landmark_ids), std::move(obs.pixels)});
  }

  if (cfg.aliases.every > 0) {
    Rng rng = make_rng(seed, "aliases");
    const auto alias_seed = substream_seed(seed, "alias_observe");
    int b = 0;
    for (std::size_t i = 0; i < ds.poses.size(); ++i) {
      if (ds.legs[i] != Direction::Backward) continue;
      const int k = b++;
      if (k < cfg.aliases.skip_first || (k - cfg.aliases.skip_first) % cfg.aliases.every != 0) continue;
      std::vector<std::size_t> far;
      for (std::size_t j = 0; j < ds.poses.size(); ++j) {
        if (ds.legs[j] == Direction::Forward &&
            (ds.poses[j].t - ds.poses[i].t).norm() >= cfg.aliases.min_offset) {
          far.push_back(j);
        }
      }
      if (far.empty()) continue;
      std::uniform_int_distribution<std::size_t> pick(0, far.size() - 1);
      const auto& src = ds.poses[far[pick(rng)]];
      auto obs = observe(src, ds.landmarks, ds.intrinsics, cfg.observe, alias_seed);
      if (obs.empty) continue;
      ds.samples[i].descriptors = std::move(obs.descriptors);
      ds.samples[i].descriptors.source_id = ds.poses[i].id;
      ds.aliased.push_back(ds.poses[i].id);
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Directory IO

inline constexpr int kDatasetVersion = 1;

inline void write_dataset(const std::filesystem::path& dir, const SequenceDataset& ds,
                          const nlohmann::json& generator = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_trajectory(dir / "poses.txt", ds.poses);
  {
    auto f = io::open_out(dir / "legs.txt");
    io::write_header(f, "legs", 1);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      f << ds.poses[i].id << ' ' << to_string(ds.legs[i]) << ' ' << ds.path_positions[i] << '\n';
    }
  }
  nlohmann::json cfg;
  cfg["format"] = "biloop-dataset";
  cfg["version"] = kDatasetVersion;
  cfg["intrinsics"] = ds.intrinsics;
  cfg["visibility_range"] = ds.visibility_range;
  cfg["aliased"] = ds.aliased;
  if (!generator.is_null()) cfg["generator"] = generator;
  io::write_text_file(dir / "config.json", cfg.dump(2) + "\n");

  for (const auto& s : ds.samples) {
    if (!s.descriptors.empty() || !s.image) {
      write_descriptors(dir / "descriptors" / (std::to_string(s.id) + ".bin"), s.descriptors);
    }
  }
  for (std::size_t i = 0; i < ds.tracks.size(); ++i) {
    auto f = io::open_out(dir / "tracks" / (std::to_string(ds.poses[i].id) + ".txt"));
    io::write_header(f, "tracks", 1);
    for (std::size_t k = 0; k < ds.tracks[i].landmark_ids.size(); ++k) {
      f << ds.tracks[i].landmark_ids[k] << ' ' << ds.tracks[i].pixels[k].x() << ' '
        << ds.tracks[i].pixels[k].y() << '\n';
    }
  }
  if (!ds.landmarks.empty()) {
    auto f = io::open_out(dir / "landmarks.txt");
    io::write_header(f, "landmarks", 1);
    for (const auto& lm : ds.landmarks) {
      f << lm.id << ' ' << lm.position.x() << ' ' << lm.position.y() << ' ' << lm.position.z();
      for (Eigen::Index j = 0; j < lm.signature.size(); ++j) f << ' ' << lm.signature(j);
      f << '\n';
    }
  }
}

namespace detail {

template <typename Fn>
void for_each_data_line(const std::filesystem::path& p, std::string_view kind, Fn&& fn) {
  auto f = io::open_in(p);
  io::expect_header(f, kind, 1);
  std::string line;
  while (std::getline(f, line)) {
    const auto body = io::strip_comment(line);
    if (body.empty()) continue;
    std::istringstream ls{std::string(body)};
    fn(ls);
  }
}

}  // namespace detail

/// Reads a dataset directory. Without legs.txt all poses are forward and
/// path positions are cumulative distances between consecutive poses.
inline SequenceDataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "poses.txt")) {
    fail(ErrorCategory::MissingDependency,
         "no dataset at '" + dir.string() + "' (run 'biloop synth' or point --dataset at a directory with poses.txt)");
  }
  SequenceDataset ds;
  ds.poses = read_trajectory(dir / "poses.txt");

  if (fs::exists(dir / "config.json")) {
    const auto cfg = nlohmann::json::parse(io::read_text_file(dir / "config.json"));
    if (cfg.value("format", "") != "biloop-dataset") {
      fail(ErrorCategory::Format, "dataset config.json has the wrong format tag");
    }
    io::check_version(cfg.value("version", -1), kDatasetVersion, "dataset");
    ds.intrinsics = cfg.value("intrinsics", CameraIntrinsics{});
    ds.visibility_range = cfg.value("visibility_range", 0.0);
    ds.aliased = cfg.value("aliased", std::vector<SampleId>{});
  }

  if (fs::exists(dir / "legs.txt")) {
    std::unordered_map<SampleId, std::pair<Direction, double>> legs;
    detail::for_each_data_line(dir / "legs.txt", "legs", [&](std::istringstream& ls) {
      SampleId id;
      std::string leg;
      double pos;
      if (!(ls >> id >> leg >> pos)) fail(ErrorCategory::Format, "legs.txt: malformed line");
      legs[id] = {direction_from_string(leg), pos};
    });
    for (const auto& p : ds.poses) {
      auto it = legs.find(p.id);
      if (it == legs.end()) fail(ErrorCategory::Format, "legs.txt: missing pose " + std::to_string(p.id));
      ds.legs.push_back(it->second.first);
      ds.path_positions.push_back(it->second.second);
    }
  } else {
    double traveled = 0.0;
    for (std::size_t i = 0; i < ds.poses.size(); ++i) {
      if (i) traveled += (ds.poses[i].t - ds.poses[i - 1].t).norm();
      ds.legs.push_back(Direction::Forward);
      ds.path_positions.push_back(traveled);
    }
  }

  for (const auto& p : ds.poses) {
    Sample s;
    s.id = p.id;
    const auto desc = dir / "descriptors" / (std::to_string(p.id) + ".bin");
    const auto img = dir / "images" / (std::to_string(p.id) + ".pgm");
    if (fs::exists(desc)) s.descriptors = read_descriptors(desc, p.id);
    if (fs::exists(img)) s.image = read_pgm(img);
    ds.samples.push_back(std::move(s));
  }

  if (fs::exists(dir / "tracks")) {
    for (const auto& p : ds.poses) {
      Track t;
      const auto tp = dir / "tracks" / (std::to_string(p.id) + ".txt");
      if (fs::exists(tp)) {
        detail::for_each_data_line(tp, "tracks", [&](std::istringstream& ls) {
          std::int64_t id;
          double u, v;
          if (!(ls >> id >> u >> v)) fail(ErrorCategory::Format, tp.string() + ": malformed line");
          t.landmark_ids.push_back(id);
          t.pixels.emplace_back(u, v);
        });
      }
      ds.tracks.push_back(std::move(t));
    }
  }

  if (fs::exists(dir / "landmarks.txt")) {
    detail::for_each_data_line(dir / "landmarks.txt", "landmarks", [&](std::istringstream& ls) {
      Landmark lm;
      double x, y, z;
      if (!(ls >> lm.id >> x >> y >> z)) fail(ErrorCategory::Format, "landmarks.txt: malformed line");
      lm.position = Vec3(x, y, z);
      std::vector<double> sig;
      for (double v; ls >> v;) sig.push_back(v);
      lm.signature = Eigen::Map<Vector>(sig.data(), static_cast<Eigen::Index>(sig.size()));
      ds.landmarks.push_back(std::move(lm));
    });
  }
  ds.validate();
  return ds;
}

}  // namespace biloop
