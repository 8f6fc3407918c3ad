#pragma once

// Precision-recall curves with trapezoidal AUC, pose error metrics and the
// delimited-text report files of a run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "biloop/dataset.hpp"
#include "biloop/error.hpp"
#include "biloop/geometry.hpp"
#include "biloop/io_util.hpp"
#include "biloop/synthworld.hpp"

namespace biloop {

struct LabeledScore {
  SampleId query_id = 0;
  SampleId db_id = 0;
  double score = 0.0;
  bool is_true_match = false;
};

struct PrPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // recall non-decreasing
  double auc = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Trapezoidal area under precision over recall.
inline double trapezoid_auc(std::span<const PrPoint> pts) {
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    area += (pts[i].recall - pts[i - 1].recall) * 0.5 * (pts[i].precision + pts[i - 1].precision);
  }
  return area;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> count_labels(std::span<const LabeledScore> s) {
  std::size_t pos = 0;
  for (const auto& x : s) pos += x.is_true_match ? 1 : 0;
  return {pos, s.size() - pos};
}

}  // namespace detail

/// Sweeps the given thresholds (any order; swept in descending order), a
/// score counting as a predicted match when score >= threshold. The curve
/// starts at (recall 0, precision 1).
inline PrCurve pr_curve(std::span<const LabeledScore> scores, std::vector<double> thresholds) {
  const auto [pos, neg] = detail::count_labels(scores);
  if (pos == 0 || neg == 0) {
    fail(ErrorCategory::InvalidInput, "pr_curve: labels must contain both classes");
  }
  std::vector<std::pair<double, bool>> sorted;
  sorted.reserve(scores.size());
  for (const auto& s : scores) {
    require(std::isfinite(s.score), "pr_curve: non-finite score");
    sorted.emplace_back(s.score, s.is_true_match);
  }
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  PrCurve c;
  c.positives = pos;
  c.negatives = neg;
  c.points.push_back(PrPoint{std::numeric_limits<double>::infinity(), 1.0, 0.0});
  std::size_t i = 0, tp = 0, fp = 0;
  for (double thr : thresholds) {
    while (i < sorted.size() && sorted[i].first >= thr) {
      (sorted[i].second ? tp : fp) += 1;
      ++i;
    }
    const double precision = tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp);
    c.points.push_back(PrPoint{thr, precision, double(tp) / double(pos)});
  }
  c.auc = trapezoid_auc(c.points);
  return c;
}

/// Thresholds at every distinct score.
inline PrCurve pr_curve(std::span<const LabeledScore> scores) {
  std::vector<double> t;
  t.reserve(scores.size());
  for (const auto& s : scores) t.push_back(s.score);
  return pr_curve(scores, std::move(t));
}

/// Lowest threshold whose precision is at least `min_precision`, i.e. the
/// threshold with the highest recall at that precision. Nullopt if none.
inline std::optional<double> select_tau(const PrCurve& c, double min_precision) {
  std::optional<double> best;
  double best_recall = -1.0;
  for (const auto& p : c.points) {
    if (!std::isfinite(p.threshold) || p.precision < min_precision) continue;
    if (p.recall > best_recall) {
      best_recall = p.recall;
      best = p.threshold;
    }
  }
  return best;
}

struct PoseError {
  double translation_error = 0.0;  // metres
  double angular_error = 0.0;      // degrees, in [0, 180]
};

inline PoseError pose_errors(const RelativePose& pred, const RelativePose& gt) {
  require(is_unit(pred.q) && is_unit(gt.q), "pose_errors: non-unit quaternion");
  return PoseError{(pred.t - gt.t).norm(), angular_distance_deg(pred.q, gt.q)};
}

// ---------------------------------------------------------------------------
// Ground-truth labels

struct EvalConfig {
  std::string label_rule = "overlap";  // "overlap" | "in_view"
  double min_overlap = 0.2;            // Jaccard of visible landmark sets
  ViewCone cone{0.0, 0.0, 15.0, 30.0}; // fov 0 means the camera field of view
  double min_precision = 0.9;          // for the suggested tau

  void validate() const {
    require(label_rule == "overlap" || label_rule == "in_view",
            "evaluation: label_rule must be 'overlap' or 'in_view'");
    require(min_overlap > 0.0 && min_overlap <= 1.0, "evaluation: min_overlap must be in (0, 1]");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, label_rule, min_overlap, cone, min_precision)

/// Decides whether dataset entries q (query) and d (database) show the same
/// place. `mode` is the travel direction of the query relative to the
/// database leg.
class GroundTruth {
 public:
  GroundTruth(const SequenceDataset& ds, const EvalConfig& cfg) : ds_(&ds), cfg_(cfg) {
    cfg_.validate();
    if (cfg_.cone.fov_deg <= 0.0) cfg_.cone.fov_deg = ds.intrinsics.fov_deg();
    if (cfg_.label_rule == "overlap") visibility_ = ds.ground_truth_visibility();
  }

  bool match(std::size_t q, std::size_t d, Direction mode) const {
    if (cfg_.label_rule == "overlap") return jaccard(visibility_[q], visibility_[d]) >= cfg_.min_overlap;
    return in_view(ds_->poses[q], ds_->poses[d], cfg_.cone, mode);
  }

 private:
  const SequenceDataset* ds_;
  EvalConfig cfg_;
  std::vector<std::vector<std::int64_t>> visibility_;
};

// ---------------------------------------------------------------------------
// Files

inline constexpr int kPrFileVersion = 1;
inline constexpr int kPoseReportVersion = 1;

inline void write_pr_csv(std::ostream& os, const PrCurve& c) {
  io::write_header(os, "pr", kPrFileVersion);
  os << "threshold,precision,recall\n";
  for (const auto& p : c.points) os << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
}

inline PrCurve read_pr_csv(std::istream& is) {
  io::expect_header(is, "pr", kPrFileVersion);
  PrCurve c;
  std::string line;
  if (!std::getline(is, line) || line.rfind("threshold", 0) != 0) {
    fail(ErrorCategory::Format, "pr file: missing column header");
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    std::string thr;
    PrPoint p;
    if (!(ls >> thr >> p.precision >> p.recall)) fail(ErrorCategory::Format, "pr file: malformed row");
    p.threshold = thr == "inf" ? std::numeric_limits<double>::infinity() : std::stod(thr);
    c.points.push_back(p);
  }
  c.auc = trapezoid_auc(c.points);
  return c;
}

struct PoseRecord {
  SampleId anchor_id = 0;
  SampleId match_id = 0;
  RelativePose pred;
  RelativePose gt;
  PoseError error;
};

inline void write_pose_csv(std::ostream& os, const std::vector<PoseRecord>& rs) {
  io::write_header(os, "pose-report", kPoseReportVersion);
  os << "anchor_id,match_id,pred_qw,pred_qx,pred_qy,pred_qz,pred_tx,pred_ty,pred_tz,"
        "gt_qw,gt_qx,gt_qy,gt_qz,gt_tx,gt_ty,gt_tz,err_m,err_deg\n";
  for (const auto& r : rs) {
    os << r.anchor_id << ',' << r.match_id;
    for (const auto* p : {&r.pred, &r.gt}) {
      os << ',' << p->q.w() << ',' << p->q.x() << ',' << p->q.y() << ',' << p->q.z() << ',' << p->t.x()
         << ',' << p->t.y() << ',' << p->t.z();
    }
    os << ',' << r.error.translation_error << ',' << r.error.angular_error << '\n';
  }
}

inline std::vector<PoseRecord> read_pose_csv(std::istream& is) {
  io::expect_header(is, "pose-report", kPoseReportVersion);
  std::string line;
  std::getline(is, line);
  std::vector<PoseRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    PoseRecord r;
    double v[16];
    if (!(ls >> r.anchor_id >> r.match_id)) fail(ErrorCategory::Format, "pose report: malformed row");
    for (double& x : v) {
      if (!(ls >> x)) fail(ErrorCategory::Format, "pose report: malformed row");
    }
    r.pred = RelativePose{Quat(v[0], v[1], v[2], v[3]), Vec3(v[4], v[5], v[6])};
    r.gt = RelativePose{Quat(v[7], v[8], v[9], v[10]), Vec3(v[11], v[12], v[13])};
    r.error = PoseError{v[14], v[15]};
    out.push_back(r);
  }
  return out;
}

/// One row of the summary table.
struct SequenceSummary {
  std::string sequence;
  std::optional<std::size_t> test_samples;
  std::optional<double> spatial_extent;  // metres
  std::optional<double> translation_error;
  std::optional<double> angular_error;
};

/// Outcome counts of a loop-closure log checked against ground truth.
struct LoopSummary {
  std::size_t keyframes = 0;
  std::size_t passed_tau = 0;        // candidates at or above tau
  std::size_t accepted = 0;
  std::size_t accepted_true = 0;
  std::size_t rejected_confidence = 0;
  std::size_t rejected_confidence_false = 0;
};

struct ReportInputs {
  std::string run = "run";
  std::optional<LoopSummary> loop;
  std::optional<PrCurve> forward;
  std::optional<PrCurve> backward;
  std::optional<std::vector<PoseRecord>> poses;
  std::vector<SequenceSummary> sequences;
  std::optional<double> suggested_tau;
};

inline constexpr const char* kGap = "--";

namespace detail {

template <typename T>
std::string cell(const std::optional<T>& v, int precision = 3) {
  if (!v) return kGap;
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << *v;
  return os.str();
}

}  // namespace detail

inline PoseError mean_pose_error(const std::vector<PoseRecord>& rs) {
  PoseError m;
  if (rs.empty()) return m;
  for (const auto& r : rs) {
    m.translation_error += r.error.translation_error;
    m.angular_error += r.error.angular_error;
  }
  m.translation_error /= double(rs.size());
  m.angular_error /= double(rs.size());
  return m;
}

inline void write_summary(std::ostream& os, const ReportInputs& in) {
  io::write_header(os, "summary", 1);
  os << "run: " << in.run << "\n\n";
  os << "place recognition\n";
  os << "direction\tauc\tpositives\tnegatives\n";
  for (const auto& [name, c] : {std::pair{"forward", &in.forward}, std::pair{"backward", &in.backward}}) {
    os << name << '\t';
    if (*c) {
      os << detail::cell(std::optional<double>((*c)->auc), 4) << '\t' << (*c)->positives << '\t'
         << (*c)->negatives << '\n';
    } else {
      os << kGap << '\t' << kGap << '\t' << kGap << '\n';
    }
  }
  os << "suggested_tau\t" << detail::cell(in.suggested_tau, 4) << "\n\n";
  os << "loop closure\n";
  os << "keyframes\tpassed_tau\taccepted\taccepted_true\trejected_confidence\trejected_confidence_false\n";
  if (in.loop) {
    const auto& l = *in.loop;
    os << l.keyframes << '\t' << l.passed_tau << '\t' << l.accepted << '\t' << l.accepted_true << '\t'
       << l.rejected_confidence << '\t' << l.rejected_confidence_false << "\n\n";
  } else {
    os << kGap << '\t' << kGap << '\t' << kGap << '\t' << kGap << '\t' << kGap << '\t' << kGap << "\n\n";
  }
  os << "pose regression\n";
  os << "sequence\ttest_samples\tspatial_extent_m\ttranslation_error_m\tangular_error_deg\n";
  if (in.sequences.empty()) {
    os << kGap << '\t' << kGap << '\t' << kGap << '\t' << kGap << '\t' << kGap << '\n';
  }
  for (const auto& s : in.sequences) {
    os << (s.sequence.empty() ? kGap : s.sequence) << '\t' << detail::cell(s.test_samples) << '\t'
       << detail::cell(s.spatial_extent, 1) << '\t' << detail::cell(s.translation_error) << '\t'
       << detail::cell(s.angular_error) << '\n';
  }
}

/// Writes pr_<run>-forward.csv, pr_<run>-backward.csv, pose_<run>.csv and
/// summary_<run>.txt into `dir`. Missing inputs leave gap markers. Returns
/// the written file names.
inline std::vector<std::string> emit_report(const std::filesystem::path& dir, const ReportInputs& in) {
  std::vector<std::string> written;
  const auto out = [&](const std::string& name) {
    written.push_back(name);
    return io::open_out(dir / name);
  };
  for (const auto& [suffix, c] : {std::pair{"forward", &in.forward}, std::pair{"backward", &in.backward}}) {
    if (!*c) continue;
    auto f = out("pr_" + in.run + "-" + suffix + ".csv");
    write_pr_csv(f, **c);
  }
  if (in.poses) {
    auto f = out("pose_" + in.run + ".csv");
    write_pose_csv(f, *in.poses);
  }
  auto f = out("summary_" + in.run + ".txt");
  write_summary(f, in);
  return written;
}

}  // namespace biloop
