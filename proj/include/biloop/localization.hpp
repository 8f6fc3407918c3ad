#pragma once

// Embedding database, exact top-N retrieval and causal loop-closure detection
// with neighbour confidence sharing.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "biloop/descriptors.hpp"
#include "biloop/error.hpp"
#include "biloop/geometry.hpp"
#include "biloop/io_util.hpp"
#include "biloop/tensor_io.hpp"

namespace biloop {

inline constexpr double kUnitVectorTolerance = 1e-4;

/// Exact (linear scan) nearest-neighbour index over unit-norm embeddings.
/// Grows by appending; path positions must be non-decreasing.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;

  void add(SampleId id, const Vector& v, double path_position) {
    require(!id_set_.count(id), "index: duplicate id " + std::to_string(id));
    require(std::abs(v.norm() - 1.0) <= kUnitVectorTolerance,
            "index: embedding " + std::to_string(id) + " is not unit-norm");
    require(vectors_.empty() || v.size() == vectors_.front().size(), "index: dimension mismatch");
    require(paths_.empty() || path_position >= paths_.back(),
            "index: path positions must be non-decreasing");
    id_set_.insert(id);
    ids_.push_back(id);
    vectors_.push_back(v);
    paths_.push_back(path_position);
  }

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  Eigen::Index dim() const { return vectors_.empty() ? 0 : vectors_.front().size(); }
  SampleId id(std::size_t i) const { return ids_[i]; }
  const Vector& vector(std::size_t i) const { return vectors_[i]; }
  double path_position(std::size_t i) const { return paths_[i]; }
  const std::vector<SampleId>& ids() const { return ids_; }

 private:
  std::vector<SampleId> ids_;
  std::vector<Vector> vectors_;
  std::vector<double> paths_;
  std::unordered_set<SampleId> id_set_;
};

inline EmbeddingIndex build_index(std::span<const SampleId> ids, std::span<const Vector> embeddings,
                                  std::span<const double> path_positions) {
  require(ids.size() == embeddings.size() && ids.size() == path_positions.size(),
          "build_index: ids, embeddings and path positions differ in length");
  EmbeddingIndex index;
  for (std::size_t i = 0; i < ids.size(); ++i) index.add(ids[i], embeddings[i], path_positions[i]);
  return index;
}

enum class Verdict { Pending, Accepted, RejectedConfidence, RejectedThreshold };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Accepted: return "accepted";
    case Verdict::RejectedConfidence: return "rejected_confidence";
    case Verdict::RejectedThreshold: return "rejected_threshold";
    case Verdict::Pending: break;
  }
  return "pending";
}

inline Verdict verdict_from_string(std::string_view s) {
  if (s == "accepted") return Verdict::Accepted;
  if (s == "rejected_confidence") return Verdict::RejectedConfidence;
  if (s == "rejected_threshold") return Verdict::RejectedThreshold;
  if (s == "pending") return Verdict::Pending;
  fail(ErrorCategory::Format, "unknown verdict '" + std::string(s) + "'");
}

struct MatchCandidate {
  SampleId query_id = 0;
  SampleId db_id = 0;
  double distance = 0.0;  // squared Euclidean
  double score = 1.0;     // 1 - distance / 2
  double db_path_position = 0.0;
  Verdict verdict = Verdict::Pending;
  std::string reason;
};

inline double similarity_from_distance(double squared_distance) { return 1.0 - 0.5 * squared_distance; }

/// Entries whose path position lies within `window` metres before
/// `current_path` (or after it) are not searchable.
struct RecencyExclusion {
  double current_path = std::numeric_limits<double>::infinity();
  double window = 0.0;

  bool excludes(double path_position) const { return path_position > current_path - window; }
};

/// Top-N entries by ascending squared distance, ties to the lower id.
inline std::vector<MatchCandidate> query_top_n(const EmbeddingIndex& index, const Vector& q,
                                               int n, const RecencyExclusion& exclusion = {},
                                               SampleId query_id = -1) {
  require(n >= 1, "query_top_n: N must be at least 1");
  std::vector<MatchCandidate> all;
  if (index.empty()) return all;
  require(q.size() == index.dim(), "query_top_n: query dimension differs from index");
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (exclusion.excludes(index.path_position(i))) continue;
    MatchCandidate c;
    c.query_id = query_id;
    c.db_id = index.id(i);
    c.distance = std::max(0.0, (index.vector(i) - q).squaredNorm());
    c.score = similarity_from_distance(c.distance);
    c.db_path_position = index.path_position(i);
    all.push_back(std::move(c));
  }
  const auto less = [](const MatchCandidate& a, const MatchCandidate& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.db_id < b.db_id;
  };
  const auto keep = std::min(all.size(), static_cast<std::size_t>(n));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), less);
  all.resize(keep);
  return all;
}

struct LocalizedAnchor {
  SampleId query_id = 0;
  SampleId matched_db_id = 0;
  double traveled_distance_at_query = 0.0;  // odometry
  double matched_path_position = 0.0;
};

/// Largest |d_path - d_odom| of a candidate over the anchors (0 without anchors).
inline double max_discrepancy(double candidate_path_position, double query_odometry,
                              std::span<const LocalizedAnchor> anchors) {
  double worst = 0.0;
  for (const auto& a : anchors) {
    const double d_path = std::abs(candidate_path_position - a.matched_path_position);
    const double d_odom = std::abs(query_odometry - a.traveled_distance_at_query);
    worst = std::max(worst, std::abs(d_path - d_odom));
  }
  return worst;
}

/// Accepts a candidate iff, against every anchor, the distance between the
/// two database matches along the mapped path agrees with the odometry
/// distance travelled between the two queries. Magnitudes are compared so a
/// revisit in the opposite direction (database positions decreasing while
/// odometry increases) is consistent. No anchors: accept.
inline bool confidence_share(double candidate_path_position, double query_odometry,
                             std::span<const LocalizedAnchor> anchors, double tol) {
  return max_discrepancy(candidate_path_position, query_odometry, anchors) <= tol;
}

struct LoopConfig {
  double tau = 0.5;                // minimum similarity score
  int top_n = 5;
  double recency_window = 20.0;    // metres of travel excluded before the query
  double keyframe_spacing = 2.0;   // metres of travel between keyframes
  double confidence_tol = 10.0;    // metres
  int confidence_anchors = 3;
  double anchor_max_age = 40.0;    // metres of travel after which an anchor is dropped; 0 keeps all
  int min_database = 10;           // warm-up: no search until this many keyframes are searchable
  bool confidence_sharing = true;

  void validate() const {
    require(top_n >= 1, "loop detection: top_n must be at least 1");
    require(recency_window >= 0.0 && keyframe_spacing >= 0.0 && confidence_tol >= 0.0,
            "loop detection: distances must be non-negative");
    require(confidence_anchors >= 0 && min_database >= 0, "loop detection: counts must be non-negative");
    require(anchor_max_age >= 0.0, "loop detection: anchor_max_age must be non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LoopConfig, tau, top_n, recency_window,
                                                keyframe_spacing, confidence_tol,
                                                confidence_anchors, anchor_max_age, min_database,
                                                confidence_sharing)

enum class Outcome { NoMatch, UniqueMatch, MultipleMatches, Rejected };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::NoMatch: return "no_match";
    case Outcome::UniqueMatch: return "unique_match";
    case Outcome::MultipleMatches: return "multiple_matches";
    case Outcome::Rejected: return "rejected";
  }
  return "no_match";
}

inline Outcome outcome_from_string(std::string_view s) {
  if (s == "no_match") return Outcome::NoMatch;
  if (s == "unique_match") return Outcome::UniqueMatch;
  if (s == "multiple_matches") return Outcome::MultipleMatches;
  if (s == "rejected") return Outcome::Rejected;
  fail(ErrorCategory::Format, "unknown outcome '" + std::string(s) + "'");
}

struct StreamFrame {
  SampleId id = 0;
  Vector embedding;
  double odometry = 0.0;  // travelled distance, non-decreasing
};

struct QueryResult {
  SampleId query_id = 0;
  double odometry = 0.0;
  Outcome outcome = Outcome::NoMatch;
  std::vector<MatchCandidate> candidates;
};

/// Online loop-closure detection over a causal stream. Keyframes are taken
/// every `keyframe_spacing` metres; each keyframe is searched against the
/// earlier keyframes outside the recency window and then added to the index.
class LoopDetector {
 public:
  explicit LoopDetector(LoopConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  /// Returns the result for keyframes and nullopt for skipped frames.
  std::optional<QueryResult> process(const StreamFrame& f) {
    require(!last_odometry_ || f.odometry >= *last_odometry_,
            "loop detection: odometry must be non-decreasing");
    last_odometry_ = f.odometry;
    if (last_keyframe_ && f.odometry - *last_keyframe_ < cfg_.keyframe_spacing) return std::nullopt;
    last_keyframe_ = f.odometry;

    QueryResult r;
    r.query_id = f.id;
    r.odometry = f.odometry;
    const RecencyExclusion excl{f.odometry, cfg_.recency_window};
    std::size_t searchable = 0;
    for (std::size_t i = 0; i < index_.size(); ++i) searchable += excl.excludes(index_.path_position(i)) ? 0 : 1;

    if (searchable >= static_cast<std::size_t>(std::max(cfg_.min_database, 1))) {
      r.candidates = query_top_n(index_, f.embedding, cfg_.top_n, excl, f.id);
      drop_stale_anchors(f.odometry);
      const std::vector<LocalizedAnchor> anchors(anchors_.begin(), anchors_.end());
      bool passed_tau = false;
      const MatchCandidate* best = nullptr;
      int accepted = 0;
      for (auto& c : r.candidates) {
        if (c.score < cfg_.tau) {
          c.verdict = Verdict::RejectedThreshold;
          c.reason = "below_tau";
          continue;
        }
        passed_tau = true;
        if (cfg_.confidence_sharing && !confidence_share(c.db_path_position, f.odometry, anchors, cfg_.confidence_tol)) {
          c.verdict = Verdict::RejectedConfidence;
          c.reason = "odometry_disagrees";
          continue;
        }
        c.verdict = Verdict::Accepted;
        c.reason = anchors.empty() ? "bootstrap" : "consistent";
        if (!best) best = &c;
        ++accepted;
      }
      if (best) push_anchor(LocalizedAnchor{f.id, best->db_id, f.odometry, best->db_path_position});
      r.outcome = accepted == 0 ? (passed_tau ? Outcome::Rejected : Outcome::NoMatch)
                  : accepted == 1 ? Outcome::UniqueMatch
                                  : Outcome::MultipleMatches;
    }
    index_.add(f.id, f.embedding, f.odometry);
    return r;
  }

  const EmbeddingIndex& index() const { return index_; }
  const std::deque<LocalizedAnchor>& anchors() const { return anchors_; }

 private:
  void push_anchor(const LocalizedAnchor& a) {
    if (cfg_.confidence_anchors == 0) return;
    anchors_.push_back(a);
    while (anchors_.size() > static_cast<std::size_t>(cfg_.confidence_anchors)) anchors_.pop_front();
  }

  void drop_stale_anchors(double odometry) {
    if (cfg_.anchor_max_age <= 0.0) return;
    while (!anchors_.empty() && odometry - anchors_.front().traveled_distance_at_query > cfg_.anchor_max_age) {
      anchors_.pop_front();
    }
  }

  LoopConfig cfg_;
  EmbeddingIndex index_;
  std::deque<LocalizedAnchor> anchors_;
  std::optional<double> last_keyframe_;
  std::optional<double> last_odometry_;
};

inline std::vector<QueryResult> causal_loop_detect(std::span<const StreamFrame> stream, const LoopConfig& cfg) {
  LoopDetector det(cfg);
  std::vector<QueryResult> out;
  for (const auto& f : stream) {
    if (auto r = det.process(f)) out.push_back(std::move(*r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr int kLoopLogVersion = 1;
inline constexpr int kIndexVersion = 1;

/// One line per keyframe: `query_id outcome [db_id score verdict]...`.
inline void write_loop_log(std::ostream& os, const std::vector<QueryResult>& results) {
  io::write_header(os, "loop-log", kLoopLogVersion);
  os << "# query_id outcome [db_id score verdict]...\n";
  for (const auto& r : results) {
    os << r.query_id << ' ' << to_string(r.outcome);
    for (const auto& c : r.candidates) os << ' ' << c.db_id << ' ' << c.score << ' ' << to_string(c.verdict);
    os << '\n';
  }
}

inline void write_loop_log(const std::filesystem::path& p, const std::vector<QueryResult>& results) {
  auto f = io::open_out(p);
  write_loop_log(f, results);
}

inline std::vector<QueryResult> read_loop_log(std::istream& is) {
  io::expect_header(is, "loop-log", kLoopLogVersion);
  std::vector<QueryResult> out;
  std::string line;
  while (std::getline(is, line)) {
    line = io::strip_comment(line);
    std::istringstream ls(line);
    QueryResult r;
    std::string outcome;
    if (!(ls >> r.query_id)) continue;
    if (!(ls >> outcome)) fail(ErrorCategory::Format, "loop log: missing outcome");
    r.outcome = outcome_from_string(outcome);
    MatchCandidate c;
    std::string verdict;
    while (ls >> c.db_id) {
      if (!(ls >> c.score >> verdict)) fail(ErrorCategory::Format, "loop log: truncated candidate");
      c.query_id = r.query_id;
      c.distance = 2.0 * (1.0 - c.score);
      c.verdict = verdict_from_string(verdict);
      r.candidates.push_back(c);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<QueryResult> read_loop_log(const std::filesystem::path& p) {
  auto f = io::open_in(p);
  return read_loop_log(f);
}

/// Stored vectors are float32; they are renormalized on load.
inline void save_index(const EmbeddingIndex& index, const std::filesystem::path& p) {
  TensorArchive a;
  a.meta["kind"] = "embedding-index";
  a.meta["version"] = kIndexVersion;
  a.meta["ids"] = index.ids();
  std::vector<double> paths(index.size());
  Matrix v(static_cast<Eigen::Index>(index.size()), index.dim());
  for (std::size_t i = 0; i < index.size(); ++i) {
    paths[i] = index.path_position(i);
    v.row(static_cast<Eigen::Index>(i)) = index.vector(i).transpose();
  }
  a.meta["path_positions"] = paths;
  if (!index.empty()) a.put("vectors", v);
  a.save(p);
}

inline EmbeddingIndex load_index(const std::filesystem::path& p) {
  const auto a = TensorArchive::load(p);
  if (a.meta.value("kind", "") != "embedding-index") {
    fail(ErrorCategory::Format, "tensor container does not hold an embedding index");
  }
  io::check_version(a.meta.value("version", -1), kIndexVersion, "embedding index");
  const auto ids = a.meta.at("ids").get<std::vector<SampleId>>();
  const auto paths = a.meta.at("path_positions").get<std::vector<double>>();
  EmbeddingIndex index;
  if (ids.empty()) return index;
  const Matrix v = a.matrix("vectors");
  require(v.rows() == static_cast<Eigen::Index>(ids.size()) && paths.size() == ids.size(),
          "embedding index: inconsistent sizes", ErrorCategory::Format);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    index.add(ids[i], v.row(static_cast<Eigen::Index>(i)).transpose().normalized(), paths[i]);
  }
  return index;
}

}  // namespace biloop
