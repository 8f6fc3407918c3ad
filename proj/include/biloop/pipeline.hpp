#pragma once

// Pipeline commands operating on a run directory. Each command reads its
// declared inputs, writes its outputs, refreshes the config snapshot
// (config.json) and records the outputs with content hashes in manifest.json.
//
//   synth        -> dataset/
//   mine         -> triplets.txt, triplets.json
//   train-embed  -> embedding.bin, embedding_history.csv
//   train-pose   -> pose.bin, pose_history.csv, pose_predictions.csv, pose_eval.json
//   index        -> index.bin
//   localize     -> loop_log.txt
//   eval         -> report/
//   sweep        -> sweep.csv

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "biloop/config.hpp"
#include "biloop/dataprep.hpp"
#include "biloop/dataset.hpp"
#include "biloop/embedding.hpp"
#include "biloop/evaluation.hpp"
#include "biloop/io_util.hpp"
#include "biloop/localization.hpp"
#include "biloop/posereg.hpp"
#include "biloop/rng.hpp"
#include "biloop/sweep.hpp"
#include "biloop/train_embedding.hpp"

namespace biloop::pipeline {

namespace fs = std::filesystem;

struct ArtifactInfo {
  const char* key;
  const char* file;
  const char* producer;
};

inline constexpr ArtifactInfo kArtifacts[] = {
    {"dataset", "dataset", "synth"},
    {"triplets", "triplets.txt", "mine"},
    {"mining_stats", "triplets.json", "mine"},
    {"embedding", "embedding.bin", "train-embed"},
    {"embedding_history", "embedding_history.csv", "train-embed"},
    {"pose", "pose.bin", "train-pose"},
    {"pose_history", "pose_history.csv", "train-pose"},
    {"pose_predictions", "pose_predictions.csv", "train-pose"},
    {"pose_eval", "pose_eval.json", "train-pose"},
    {"index", "index.bin", "index"},
    {"loop_log", "loop_log.txt", "localize"},
    {"report", "report", "eval"},
    {"sweep", "sweep.csv", "sweep"},
};

inline const ArtifactInfo& artifact(std::string_view key) {
  for (const auto& a : kArtifacts) {
    if (a.key == key) return a;
  }
  fail(ErrorCategory::InvalidInput, "unknown artifact '" + std::string(key) + "'");
}

inline constexpr int kRunManifestVersion = 1;

/// FNV-1a over a file, or over the sorted relative paths and contents of a
/// directory tree.
inline std::uint64_t content_hash(const fs::path& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  const auto mix = [&h](std::string_view s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ull;
    }
  };
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) files.push_back(fs::relative(e.path(), p));
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      mix(f.generic_string());
      mix(io::read_text_file(p / f));
    }
  } else {
    mix(io::read_text_file(p));
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

class Run {
 public:
  Run(RunConfig cfg, fs::path dir, std::ostream& log) : cfg_(std::move(cfg)), dir_(std::move(dir)), log_(&log) {
    cfg_.validate();
  }

  const RunConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  std::ostream& log() const { return *log_; }

  fs::path path(std::string_view key) const {
    if (key == "dataset" && !cfg_.dataset.empty()) return fs::path(cfg_.dataset);
    return dir_ / artifact(key).file;
  }

  bool has(std::string_view key) const { return fs::exists(path(key)); }

  /// Path of a prerequisite; a dependency error naming the producer if absent.
  fs::path need(std::string_view key) const {
    const auto p = path(key);
    if (!fs::exists(p)) {
      const auto& a = artifact(key);
      fail(ErrorCategory::MissingDependency, "missing " + std::string(a.key) + " ('" + p.string() +
                                                 "'); run 'biloop " + a.producer + "' first");
    }
    return p;
  }

  /// Writes the config snapshot and records artifacts in manifest.json.
  void record(std::string_view command, std::initializer_list<std::string_view> keys) const {
    fs::create_directories(dir_);
    io::write_text_file(dir_ / "config.json", nlohmann::json(cfg_).dump(2) + "\n");
    nlohmann::json m;
    const auto mp = dir_ / "manifest.json";
    if (fs::exists(mp)) m = nlohmann::json::parse(io::read_text_file(mp));
    m["format"] = "biloop-run";
    m["version"] = kRunManifestVersion;
    m["name"] = cfg_.name;
    m["seed"] = cfg_.seed;
    m["config_hash"] = hex(content_hash(dir_ / "config.json"));
    for (auto key : keys) {
      const auto p = path(key);
      if (!fs::exists(p)) continue;
      m["artifacts"][std::string(key)] = {{"file", p.lexically_proximate(dir_).generic_string()},
                                          {"producer", std::string(command)},
                                          {"hash", hex(content_hash(p))}};
    }
    io::write_text_file(mp, m.dump(2) + "\n");
  }

  std::uint64_t seed() const { return cfg_.seed; }

 private:
  RunConfig cfg_;
  fs::path dir_;
  std::ostream* log_;
};

// ---------------------------------------------------------------------------
// Shared loaders

inline SequenceDataset load_dataset(const Run& run) {
  const auto p = run.path("dataset");
  if (!fs::exists(p / "poses.txt")) {
    fail(ErrorCategory::MissingDependency,
         "missing dataset ('" + p.string() + "'); run 'biloop synth' first or set 'dataset' in the config");
  }
  return read_dataset(p);
}

inline Backend make_backend(const RunConfig& cfg, const SequenceDataset& ds) {
  if (cfg.embedding.backend == "conv") {
    const auto& e = cfg.embedding;
    return Backend(ConvBackend::make(e.conv_dim, e.conv_patch, e.conv_stride, substream_seed(cfg.seed, "backend")));
  }
  int dim = 0;
  for (const auto& s : ds.samples) {
    if (!s.descriptors.empty()) {
      dim = static_cast<int>(s.descriptors.dim());
      break;
    }
  }
  require(dim > 0, "dataset has no local descriptors for the passthrough backend", ErrorCategory::EmptyInput);
  return Backend(PassthroughBackend{dim});
}

/// Samples a backend can embed.
inline std::vector<Sample> usable_samples(const SequenceDataset& ds, const Backend& b) {
  std::vector<Sample> out;
  for (const auto& s : ds.samples) {
    if (b.trainable() ? s.image.has_value() : !s.descriptors.empty()) out.push_back(s);
  }
  return out;
}

template <typename T>
std::vector<T> seeded_subset(std::vector<T> v, int limit, std::uint64_t seed, std::string_view stream) {
  if (limit <= 0 || v.size() <= static_cast<std::size_t>(limit)) return v;
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, stream);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(limit));
  std::sort(idx.begin(), idx.end());
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(std::move(v[i]));
  return out;
}

inline void write_history(const fs::path& p, const std::vector<double>& train, const std::vector<double>& val) {
  auto f = io::open_out(p);
  io::write_header(f, "history", 1);
  f << "epoch,train_loss,val_loss\n";
  for (std::size_t i = 0; i < train.size(); ++i) f << i << ',' << train[i] << ',' << val[i] << '\n';
}

// ---------------------------------------------------------------------------
// Commands

inline void synth(const Run& run) {
  const auto& cfg = run.config();
  const auto ds = build_synthetic_dataset(cfg.world, cfg.seed);
  const auto dir = run.dir() / artifact("dataset").file;
  if (fs::exists(dir)) fs::remove_all(dir);
  write_dataset(dir, ds, nlohmann::json(cfg.world));
  run.log() << "synth: " << ds.size() << " poses, " << ds.landmarks.size() << " landmarks, "
            << ds.aliased.size() << " aliased observations\n";
  run.record("synth", {"dataset"});
}

inline void mine(const Run& run) {
  const auto& cfg = run.config();
  const auto ds = load_dataset(run);
  std::vector<Triplet> all;
  nlohmann::json stats;
  for (const auto& m : cfg.mining_modes) {
    const auto r = mine_triplets(ds, cfg.mining, direction_from_string(m), cfg.seed);
    all.insert(all.end(), r.triplets.begin(), r.triplets.end());
    stats[m] = {{"triplets", r.triplets.size()},
                {"queries", r.stats.queries},
                {"skipped_no_positive", r.stats.skipped_no_positive},
                {"skipped_no_negative", r.stats.skipped_no_negative},
                {"validated", r.stats.validated},
                {"dropped_no_observation", r.stats.dropped_no_observation},
                {"discarded_reprojection", r.stats.discarded_reprojection}};
    run.log() << "mine: " << m << " " << r.triplets.size() << " triplets from " << r.stats.queries
              << " queries (" << r.stats.skipped_no_positive << " without positive, "
              << r.stats.discarded_reprojection << " discarded by reprojection)\n";
  }
  require(!all.empty(), "mine: no triplets could be mined", ErrorCategory::EmptyInput);
  write_manifest(run.path("triplets"), all);
  const nlohmann::json side = {{"format", "biloop-mining"}, {"version", 1}, {"mining", cfg.mining},
                               {"modes", cfg.mining_modes}, {"seed", cfg.seed}, {"stats", stats}};
  io::write_text_file(run.path("mining_stats"), side.dump(2) + "\n");
  run.record("mine", {"triplets", "mining_stats"});
}

inline EmbeddingModel initial_model(const RunConfig& cfg, const SequenceDataset& ds) {
  const auto backend = make_backend(cfg, ds);
  return init_model(usable_samples(ds, backend), backend, cfg.embedding.init, cfg.seed);
}

inline void train_embed(const Run& run) {
  const auto& cfg = run.config();
  const auto ds = load_dataset(run);
  auto triplets = read_manifest(run.need("triplets"));
  triplets = seeded_subset(std::move(triplets), cfg.embedding.max_triplets, cfg.seed, "triplet_subset");
  auto model = initial_model(cfg, ds);
  const SampleIndex samples(ds.samples);
  const auto r = train_embedding(std::move(model), triplets, samples, cfg.embedding.train, cfg.seed);
  save_model(r.model, run.path("embedding"));
  write_history(run.path("embedding_history"), r.history.train, r.history.val);
  run.log() << "train-embed: " << triplets.size() << " triplets, loss " << r.history.val.front() << " -> "
            << r.history.val[static_cast<std::size_t>(r.history.best_epoch)] << " (best epoch "
            << r.history.best_epoch << ")\n";
  run.record("train-embed", {"embedding", "embedding_history"});
}

struct PoseEvaluation {
  std::vector<PoseRecord> records;
  std::size_t demoted = 0;
};

inline PoseEvaluation evaluate_pose_head(const PoseRegressor& r, const PoseScaler& s, FeatureTable& features,
                                         const std::vector<PosePair>& pairs) {
  PoseEvaluation e;
  for (const auto& p : pairs) {
    try {
      const auto pred = predict_relative_pose(r, s, features.at(p.anchor), features.at(p.other));
      e.records.push_back(PoseRecord{p.anchor, p.other, pred, p.gt, pose_errors(pred, p.gt)});
    } catch (const Error& err) {
      if (err.category() != ErrorCategory::Degenerate) throw;
      ++e.demoted;
    }
  }
  return e;
}

inline void train_pose(const Run& run) {
  const auto& cfg = run.config();
  const auto ds = load_dataset(run);
  const auto triplets = read_manifest(run.need("triplets"));
  const auto model = load_embedding_model(run.need("embedding"));
  auto pairs = seeded_subset(pairs_from_triplets(triplets), cfg.pose.max_pairs, cfg.seed, "pair_subset");
  const SampleIndex samples(ds.samples);
  FeatureTable features(model, samples, cfg.pose.regressor.branch_features);
  const auto r = train_pose_regressor(pairs, features, cfg.pose.regressor, cfg.seed);
  save_pose_model(r.regressor, r.scaler, run.path("pose"));
  write_history(run.path("pose_history"), r.train_loss, r.val_loss);

  const auto& test = r.split.held_out.empty() ? r.split.train : r.split.held_out;
  const auto trained = evaluate_pose_head(r.regressor, r.scaler, features, test);
  const auto untrained_head = PoseRegressor::make(r.regressor.input_dim(), cfg.pose.regressor, cfg.seed);
  const auto untrained = evaluate_pose_head(untrained_head, r.scaler, features, test);
  {
    auto f = io::open_out(run.path("pose_predictions"));
    write_pose_csv(f, trained.records);
  }
  const auto mt = mean_pose_error(trained.records);
  const auto mu = mean_pose_error(untrained.records);
  const nlohmann::json summary = {
      {"format", "biloop-pose-eval"},
      {"version", 1},
      {"pairs", pairs.size()},
      {"held_out", test.size()},
      {"best_epoch", r.best_epoch},
      {"trained", {{"translation_m", mt.translation_error}, {"angular_deg", mt.angular_error},
                   {"demoted", trained.demoted}}},
      {"untrained", {{"translation_m", mu.translation_error}, {"angular_deg", mu.angular_error},
                     {"demoted", untrained.demoted}}},
      {"pinned_components", r.scaler.pinned}};
  io::write_text_file(run.path("pose_eval"), summary.dump(2) + "\n");
  run.log() << "train-pose: " << pairs.size() << " pairs, held-out error " << mt.translation_error << " m / "
            << mt.angular_error << " deg (untrained head " << mu.translation_error << " m / " << mu.angular_error
            << " deg)\n";
  run.record("train-pose", {"pose", "pose_history", "pose_predictions", "pose_eval"});
}

inline void build_index_cmd(const Run& run) {
  const auto ds = load_dataset(run);
  const auto model = load_embedding_model(run.need("embedding"));
  EmbeddingIndex index;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    if (model.backend.trainable() ? !s.image.has_value() : s.descriptors.empty()) {
      ++skipped;
      continue;
    }
    index.add(s.id, embed(model, s), ds.path_positions[i]);
  }
  save_index(index, run.path("index"));
  run.log() << "index: " << index.size() << " embeddings (" << skipped << " samples without observations)\n";
  run.record("index", {"index"});
}

inline std::vector<StreamFrame> stream_from_index(const EmbeddingIndex& index) {
  std::vector<StreamFrame> frames;
  frames.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    frames.push_back(StreamFrame{index.id(i), index.vector(i), index.path_position(i)});
  }
  return frames;
}

inline void localize(const Run& run) {
  const auto index = load_index(run.need("index"));
  const auto frames = stream_from_index(index);
  const auto results = causal_loop_detect(frames, run.config().loop);
  write_loop_log(run.path("loop_log"), results);
  std::map<Outcome, std::size_t> counts;
  for (const auto& r : results) ++counts[r.outcome];
  run.log() << "localize: " << results.size() << " keyframes; unique " << counts[Outcome::UniqueMatch]
            << ", multiple " << counts[Outcome::MultipleMatches] << ", rejected " << counts[Outcome::Rejected]
            << ", none " << counts[Outcome::NoMatch] << "\n";
  run.record("localize", {"loop_log"});
}

/// All-pairs similarity scores between legs with ground-truth labels.
inline std::vector<LabeledScore> retrieval_scores(const SequenceDataset& ds, const EmbeddingIndex& index,
                                                  const GroundTruth& gt, Direction query_leg,
                                                  Direction db_leg) {
  std::vector<std::size_t> q_rows, d_rows;  // index rows
  std::vector<std::size_t> q_ds, d_ds;      // dataset rows
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto k = ds.index_of(index.id(i));
    if (ds.legs[k] == query_leg) {
      q_rows.push_back(i);
      q_ds.push_back(k);
    }
    if (ds.legs[k] == db_leg) {
      d_rows.push_back(i);
      d_ds.push_back(k);
    }
  }
  const Direction mode = query_leg == db_leg ? Direction::Forward : Direction::Backward;
  std::vector<LabeledScore> out;
  for (std::size_t a = 0; a < q_rows.size(); ++a) {
    for (std::size_t b = 0; b < d_rows.size(); ++b) {
      if (q_rows[a] == d_rows[b]) continue;
      const double d2 = (index.vector(q_rows[a]) - index.vector(d_rows[b])).squaredNorm();
      out.push_back(LabeledScore{index.id(q_rows[a]), index.id(d_rows[b]), similarity_from_distance(d2),
                                 gt.match(q_ds[a], d_ds[b], mode)});
    }
  }
  return out;
}

inline LoopSummary summarize_loop_log(const SequenceDataset& ds, const GroundTruth& gt,
                                      const std::vector<QueryResult>& log) {
  LoopSummary s;
  s.keyframes = log.size();
  for (const auto& r : log) {
    const auto q = ds.index_of(r.query_id);
    for (const auto& c : r.candidates) {
      if (c.verdict == Verdict::RejectedThreshold || c.verdict == Verdict::Pending) continue;
      ++s.passed_tau;
      const auto d = ds.index_of(c.db_id);
      const bool truth = gt.match(q, d, ds.legs[q] == ds.legs[d] ? Direction::Forward : Direction::Backward);
      if (c.verdict == Verdict::Accepted) {
        ++s.accepted;
        s.accepted_true += truth ? 1 : 0;
      } else {
        ++s.rejected_confidence;
        s.rejected_confidence_false += truth ? 0 : 1;
      }
    }
  }
  return s;
}

inline std::optional<PrCurve> try_pr_curve(const std::vector<LabeledScore>& s, std::ostream& log,
                                           std::string_view what) {
  try {
    return pr_curve(s);
  } catch (const Error& e) {
    log << "eval: no " << what << " curve: " << e.what() << "\n";
    return std::nullopt;
  }
}

inline void evaluate(const Run& run) {
  const auto& cfg = run.config();
  ReportInputs in;
  in.run = cfg.name;
  std::optional<SequenceDataset> ds;
  if (fs::exists(run.path("dataset") / "poses.txt")) ds = load_dataset(run);
  const bool gt_ok = ds && ds->has_ground_truth();
  if (!gt_ok) run.log() << "eval: no ground-truth visibility; retrieval sections left as gaps\n";

  if (gt_ok) {
    const GroundTruth gt(*ds, cfg.eval);
    if (run.has("index")) {
      const auto index = load_index(run.path("index"));
      const auto fwd = retrieval_scores(*ds, index, gt, Direction::Forward, Direction::Forward);
      const auto bwd = retrieval_scores(*ds, index, gt, Direction::Backward, Direction::Forward);
      in.forward = try_pr_curve(fwd, run.log(), "forward");
      in.backward = try_pr_curve(bwd, run.log(), "backward");
      std::vector<LabeledScore> both = fwd;
      both.insert(both.end(), bwd.begin(), bwd.end());
      if (const auto c = try_pr_curve(both, run.log(), "combined")) in.suggested_tau = select_tau(*c, cfg.eval.min_precision);
    }
    if (run.has("loop_log")) in.loop = summarize_loop_log(*ds, gt, read_loop_log(run.path("loop_log")));
  }
  if (run.has("pose_predictions")) {
    std::ifstream f(run.path("pose_predictions"));
    in.poses = read_pose_csv(f);
    const auto m = mean_pose_error(*in.poses);
    SequenceSummary row;
    row.sequence = cfg.name;
    row.test_samples = in.poses->size();
    if (ds && !ds->path_positions.empty()) row.spatial_extent = ds->path_positions.back();
    if (!in.poses->empty()) {
      row.translation_error = m.translation_error;
      row.angular_error = m.angular_error;
    }
    in.sequences.push_back(row);
  }
  const auto dir = run.path("report");
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  emit_report(dir, in);
  run.log() << "eval: forward AUC " << (in.forward ? std::to_string(in.forward->auc) : std::string(kGap))
            << ", backward AUC " << (in.backward ? std::to_string(in.backward->auc) : std::string(kGap)) << "\n";
  run.record("eval", {"report"});
}

inline void sweep(const Run& run) {
  const auto& cfg = run.config();
  const auto ds = load_dataset(run);
  const auto model = initial_model(cfg, ds);
  const auto r = range_sweep(ds, model, cfg.mining, cfg.embedding.train, cfg.sweep, cfg.seed);
  {
    auto f = io::open_out(run.path("sweep"));
    write_sweep(f, r);
  }
  if (r.argmin) {
    const auto& c = r.cells[*r.argmin];
    run.log() << "sweep: best cell [" << c.d_min << ", " << c.d_max << "] m\n";
  } else {
    run.log() << "sweep: every cell was empty\n";
  }
  run.record("sweep", {"sweep"});
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth", "mine", "train-embed", "train-pose",
                                                 "index", "localize", "eval", "sweep"};
  return names;
}

inline void run_command(const Run& run, std::string_view command) {
  if (command == "synth") return synth(run);
  if (command == "mine") return mine(run);
  if (command == "train-embed") return train_embed(run);
  if (command == "train-pose") return train_pose(run);
  if (command == "index") return build_index_cmd(run);
  if (command == "localize") return localize(run);
  if (command == "eval") return evaluate(run);
  if (command == "sweep") return sweep(run);
  fail(ErrorCategory::InvalidInput, "unknown command '" + std::string(command) + "'");
}

}  // namespace biloop::pipeline
