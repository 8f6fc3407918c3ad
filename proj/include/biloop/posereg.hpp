#pragma once

// Relative 6-DoF pose regression between two views.
//
// Targets are 7-vectors [tx, ty, tz, qw, qx, qy, qz] mapped component-wise
// into [0, 1] by a PoseScaler fitted on the training targets, so no weight
// between translation and rotation terms is needed; the loss is the plain
// mean squared error. The head is three fully connected layers with leaky
// rectifiers and dropout between them, fed with the concatenated features
// of the two views from a shared (siamese) encoder.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "biloop/dataprep.hpp"
#include "biloop/embedding.hpp"
#include "biloop/geometry.hpp"
#include "biloop/optim.hpp"
#include "biloop/rng.hpp"
#include "biloop/tensor_io.hpp"
#include "biloop/train_embedding.hpp"

namespace biloop {

using PoseVector = Eigen::Matrix<double, 7, 1>;

/// Target quaternion sign: the largest-magnitude component is made positive.
/// Unlike w >= 0 this stays continuous around half-turn rotations, which
/// backward pairs sit on.
inline Quat regression_hemisphere(Quat q) {
  Eigen::Index arg;
  q.coeffs().cwiseAbs().maxCoeff(&arg);
  if (q.coeffs()(arg) < 0.0) q.coeffs() = -q.coeffs();
  return q;
}

inline PoseVector to_pose_vector(const RelativePose& r) {
  const Quat q = regression_hemisphere(r.q.normalized());
  PoseVector v;
  v << r.t.x(), r.t.y(), r.t.z(), q.w(), q.x(), q.y(), q.z();
  return v;
}

// ---------------------------------------------------------------------------
// Range scaling

struct PoseScaler {
  PoseVector d_min = PoseVector::Zero();
  PoseVector d_max = PoseVector::Ones();
  double sc_min = 0.0;
  double sc_max = 1.0;
  std::array<bool, 7> pinned{};  // components with no spread in the fit data

  static constexpr double kPinHalfWidth = 1e-3;

  static PoseScaler fit(const std::vector<PoseVector>& targets) {
    require(!targets.empty(), "pose scaler: no targets to fit", ErrorCategory::EmptyInput);
    PoseScaler s;
    s.d_min = targets.front();
    s.d_max = targets.front();
    for (const auto& t : targets) {
      s.d_min = s.d_min.cwiseMin(t);
      s.d_max = s.d_max.cwiseMax(t);
    }
    for (int i = 0; i < 7; ++i) {
      if (s.d_max(i) - s.d_min(i) <= 1e-9) {
        const double v = 0.5 * (s.d_max(i) + s.d_min(i));
        s.d_min(i) = v - kPinHalfWidth;
        s.d_max(i) = v + kPinHalfWidth;
        s.pinned[static_cast<std::size_t>(i)] = true;
      }
    }
    return s;
  }

  void validate() const {
    for (int i = 0; i < 7; ++i) require(d_max(i) > d_min(i), "pose scaler: empty range");
    require(sc_max > sc_min, "pose scaler: empty target range");
  }

  PoseVector scale(const PoseVector& d) const {
    return ((d - d_min).array() / (d_max - d_min).array() * (sc_max - sc_min) + sc_min).matrix();
  }

  /// Inverse of scale. Components outside [sc_min, sc_max] are clamped and
  /// counted in `clamped` when given.
  PoseVector unscale(PoseVector s, int* clamped = nullptr) const {
    int n = 0;
    for (int i = 0; i < 7; ++i) {
      if (s(i) < sc_min || s(i) > sc_max) {
        s(i) = std::clamp(s(i), sc_min, sc_max);
        ++n;
      }
    }
    if (clamped) *clamped = n;
    return (d_min.array() + (s.array() - sc_min) / (sc_max - sc_min) * (d_max - d_min).array()).matrix();
  }
};

inline double pose_mse_loss(const PoseVector& scaled_gt, const PoseVector& estimate) {
  return (scaled_gt - estimate).squaredNorm() / 7.0;
}

/// Translation error plus beta-weighted quaternion error; kept as a baseline
/// to compare against range scaling.
inline double beta_weighted_loss(const Vec3& dt_gt, const Vec3& dt, const Eigen::Vector4d& dq_gt,
                                 const Eigen::Vector4d& dq, double beta) {
  require(beta > 0.0, "beta_weighted_loss: beta must be positive");
  return (dt_gt - dt).squaredNorm() + beta * (dq_gt - dq).squaredNorm();
}

// ---------------------------------------------------------------------------
// Regression head

struct PoseRegressorConfig {
  std::vector<int> hidden = {1024, 256};  // two hidden widths; output is 7
  double dropout = 0.3;
  double leak = 0.1;
  std::string branch_features = "vlad";  // "vlad" | "embedding"
  int epochs = 60;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double lr_decay = 1.0;
  double weight_decay = 0.0;
  double val_fraction = 0.2;
  int patience = 15;

  void validate() const {
    require(hidden.size() == 2 && hidden[0] >= 1 && hidden[1] >= 1,
            "pose regressor: exactly two positive hidden widths required");
    require(dropout >= 0.0 && dropout < 1.0, "pose regressor: dropout must be in [0, 1)");
    require(branch_features == "vlad" || branch_features == "embedding",
            "pose regressor: branch_features must be 'vlad' or 'embedding'");
    require(epochs >= 0 && batch_size >= 1 && learning_rate > 0.0, "pose regressor: invalid schedule");
    require(val_fraction >= 0.0 && val_fraction < 1.0, "pose regressor: val_fraction must be in [0, 1)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PoseRegressorConfig, hidden, dropout, leak,
                                                branch_features, epochs, batch_size, learning_rate,
                                                lr_decay, weight_decay, val_fraction, patience)

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct PoseRegressor {
  std::array<DenseLayer, 3> layers;
  double dropout = 0.3;
  double leak = 0.1;
  std::string branch_features = "vlad";

  Eigen::Index input_dim() const { return layers[0].weight.cols(); }

  static PoseRegressor make(Eigen::Index input_dim, const PoseRegressorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    PoseRegressor r;
    r.dropout = cfg.dropout;
    r.leak = cfg.leak;
    r.branch_features = cfg.branch_features;
    Rng rng = make_rng(seed, "pose_init");
    const std::array<Eigen::Index, 4> dims{input_dim, cfg.hidden[0], cfg.hidden[1], 7};
    for (std::size_t l = 0; l < 3; ++l) {
      const double limit = std::sqrt(6.0 / double(dims[l] + dims[l + 1]));
      std::uniform_real_distribution<double> u(-limit, limit);
      r.layers[l].weight.resize(dims[l + 1], dims[l]);
      for (Eigen::Index i = 0; i < r.layers[l].weight.size(); ++i) r.layers[l].weight.data()[i] = u(rng);
      r.layers[l].bias = Vector::Zero(dims[l + 1]);
    }
    return r;
  }
};

/// Activations of a batch (one column per pair) kept for back-propagation.
struct HeadCache {
  Matrix input;
  std::array<Matrix, 2> pre, act, mask;
  Matrix output;
};

/// Forward pass; dropout masks are drawn from `rng` when given (training).
inline Matrix head_forward(const PoseRegressor& r, const Matrix& input, Rng* rng = nullptr,
                           HeadCache* cache = nullptr) {
  Matrix x = input;
  HeadCache c;
  for (std::size_t l = 0; l < 2; ++l) {
    Matrix pre = r.layers[l].weight * x;
    pre.colwise() += r.layers[l].bias;
    Matrix act = (pre.array() > 0.0).select(pre, r.leak * pre);
    Matrix mask = Matrix::Ones(act.rows(), act.cols());
    if (rng && r.dropout > 0.0) {
      std::bernoulli_distribution keep(1.0 - r.dropout);
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? 1.0 / (1.0 - r.dropout) : 0.0;
      act = act.cwiseProduct(mask);
    }
    if (cache) {
      c.pre[l] = pre;
      c.act[l] = act;
      c.mask[l] = mask;
    }
    x = std::move(act);
  }
  Matrix out = r.layers[2].weight * x;
  out.colwise() += r.layers[2].bias;
  if (cache) {
    c.input = input;
    c.output = out;
    *cache = std::move(c);
  }
  return out;
}

struct HeadGradients {
  std::array<Matrix, 3> weight;
  std::array<Vector, 3> bias;
  Matrix input;
};

/// Gradients of a loss given dLoss/d(output) for the cached batch.
inline HeadGradients head_backward(const PoseRegressor& r, const HeadCache& c, const Matrix& d_out) {
  HeadGradients g;
  Matrix d = d_out;
  for (int l = 2; l >= 0; --l) {
    const Matrix& in = l == 0 ? c.input : c.act[static_cast<std::size_t>(l - 1)];
    const auto ul = static_cast<std::size_t>(l);
    g.weight[ul] = d * in.transpose();
    g.bias[ul] = d.rowwise().sum();
    Matrix d_in = r.layers[ul].weight.transpose() * d;
    if (l > 0) {
      const auto pl = static_cast<std::size_t>(l - 1);
      d_in = d_in.cwiseProduct(c.mask[pl]);
      d = (c.pre[pl].array() > 0.0).select(d_in, r.leak * d_in);
    } else {
      g.input = std::move(d_in);
    }
  }
  return g;
}

/// Mean of the squared component differences over a batch, and its gradient
/// with respect to the output.
inline double batch_mse(const Matrix& out, const Matrix& target, Matrix* d_out = nullptr) {
  const double n = double(out.cols()) * double(out.rows());
  const Matrix diff = out - target;
  if (d_out) *d_out = 2.0 * diff / n;
  return diff.squaredNorm() / n;
}

// ---------------------------------------------------------------------------
// Features, training and prediction

/// Siamese branch features of a sample from a (frozen) embedding model.
inline Vector branch_features(const EmbeddingModel& m, const Sample& s, const std::string& kind) {
  if (kind == "embedding") return embed(m, s);
  return vlad_soft_forward(m.backend.extract(s), m.vlad, m.vlad_options).flat();
}

struct PosePair {
  SampleId anchor = 0;
  SampleId other = 0;
  RelativePose gt;
};

/// Unique (anchor, positive) pairs of a manifest in first-seen order.
inline std::vector<PosePair> pairs_from_triplets(const std::vector<Triplet>& ts) {
  std::vector<PosePair> out;
  std::set<std::pair<SampleId, SampleId>> seen;
  for (const auto& t : ts) {
    if (seen.emplace(t.anchor, t.positive).second) out.push_back(PosePair{t.anchor, t.positive, t.rel});
  }
  return out;
}

struct PairSplit {
  std::vector<PosePair> train, held_out;
};

inline PairSplit split_pairs(const std::vector<PosePair>& pairs, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, "pose_split");
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_out = static_cast<std::size_t>(std::floor(fraction * double(pairs.size())));
  std::vector<bool> out(pairs.size(), false);
  for (std::size_t i = 0; i < n_out; ++i) out[idx[i]] = true;
  PairSplit s;
  for (std::size_t i = 0; i < pairs.size(); ++i) (out[i] ? s.held_out : s.train).push_back(pairs[i]);
  return s;
}

/// Frozen per-sample features, computed once.
class FeatureTable {
 public:
  FeatureTable(const EmbeddingModel& m, const SampleIndex& samples, const std::string& kind)
      : model_(&m), samples_(&samples), kind_(kind) {}

  const Vector& at(SampleId id) {
    auto it = cache_.find(id);
    if (it == cache_.end()) it = cache_.emplace(id, branch_features(*model_, samples_->at(id), kind_)).first;
    return it->second;
  }

  Matrix inputs(const std::vector<PosePair>& pairs, std::size_t begin, std::size_t end) {
    const Eigen::Index f = at(pairs[begin].anchor).size();
    Matrix x(2 * f, static_cast<Eigen::Index>(end - begin));
    for (std::size_t i = begin; i < end; ++i) {
      const auto c = static_cast<Eigen::Index>(i - begin);
      x.col(c).head(f) = at(pairs[i].anchor);
      x.col(c).tail(f) = at(pairs[i].other);
    }
    return x;
  }

 private:
  const EmbeddingModel* model_;
  const SampleIndex* samples_;
  std::string kind_;
  std::map<SampleId, Vector> cache_;
};

struct PoseTrainResult {
  PoseRegressor regressor;
  PoseScaler scaler;
  std::vector<double> train_loss;  // entry 0 is the untrained head
  std::vector<double> val_loss;
  int best_epoch = 0;
  PairSplit split;
};

inline double mean_pose_loss(const PoseRegressor& r, const PoseScaler& s, FeatureTable& features,
                             const std::vector<PosePair>& pairs) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t b = 0; b < pairs.size(); b += kChunk) {
    const auto e = std::min(pairs.size(), b + kChunk);
    const Matrix out = head_forward(r, features.inputs(pairs, b, e));
    for (std::size_t i = b; i < e; ++i) {
      total += pose_mse_loss(s.scale(to_pose_vector(pairs[i].gt)), out.col(static_cast<Eigen::Index>(i - b)));
    }
  }
  return total / double(pairs.size());
}

/// Fits the scaler on training targets and trains the head with Adam on the
/// mean squared error of scaled targets. Encoder features stay frozen.
inline PoseTrainResult train_pose_regressor(const std::vector<PosePair>& pairs,
                                            FeatureTable& features,
                                            const PoseRegressorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(!pairs.empty(), "train_pose_regressor: no pairs", ErrorCategory::EmptyInput);
  PoseTrainResult r;
  r.split = split_pairs(pairs, cfg.val_fraction, seed);
  if (r.split.train.empty()) r.split.train = r.split.held_out;
  const auto& val = r.split.held_out.empty() ? r.split.train : r.split.held_out;

  std::vector<PoseVector> targets;
  for (const auto& p : r.split.train) targets.push_back(to_pose_vector(p.gt));
  r.scaler = PoseScaler::fit(targets);

  const Eigen::Index in = 2 * features.at(r.split.train.front().anchor).size();
  r.regressor = PoseRegressor::make(in, cfg, seed);
  r.train_loss.push_back(mean_pose_loss(r.regressor, r.scaler, features, r.split.train));
  r.val_loss.push_back(mean_pose_loss(r.regressor, r.scaler, features, val));

  PoseRegressor best = r.regressor;
  double best_val = r.val_loss.back();
  int wait = 0;
  Adam adam(AdamConfig{cfg.learning_rate});
  std::vector<PosePair> order = r.split.train;
  Rng dropout_rng = make_rng(seed, "pose_dropout");

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    adam.set_learning_rate(cfg.learning_rate * std::pow(cfg.lr_decay, epoch - 1));
    Rng shuffle_rng = make_rng(seed, "pose_epoch", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const auto e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const Matrix x = features.inputs(order, b, e);
      Matrix target(7, x.cols());
      for (std::size_t i = b; i < e; ++i) {
        target.col(static_cast<Eigen::Index>(i - b)) = r.scaler.scale(to_pose_vector(order[i].gt));
      }
      HeadCache cache;
      const Matrix out = head_forward(r.regressor, x, &dropout_rng, &cache);
      Matrix d_out;
      const double loss = batch_mse(out, target, &d_out);
      if (!std::isfinite(loss)) {
        fail(ErrorCategory::Divergence, "train_pose_regressor: non-finite loss at epoch " + std::to_string(epoch));
      }
      auto g = head_backward(r.regressor, cache, d_out);
      std::vector<ParamRef> refs;
      for (std::size_t l = 0; l < 3; ++l) {
        if (cfg.weight_decay > 0.0) g.weight[l] += cfg.weight_decay * r.regressor.layers[l].weight;
        refs.push_back(param_ref(r.regressor.layers[l].weight, g.weight[l]));
        refs.push_back(param_ref(r.regressor.layers[l].bias, g.bias[l]));
      }
      adam.step(refs);
    }
    r.train_loss.push_back(mean_pose_loss(r.regressor, r.scaler, features, r.split.train));
    r.val_loss.push_back(mean_pose_loss(r.regressor, r.scaler, features, val));
    if (!std::isfinite(r.val_loss.back())) {
      fail(ErrorCategory::Divergence, "train_pose_regressor: non-finite validation loss");
    }
    if (r.val_loss.back() < best_val) {
      best_val = r.val_loss.back();
      best = r.regressor;
      r.best_epoch = epoch;
      wait = 0;
    } else if (++wait >= cfg.patience) {
      break;
    }
  }
  r.regressor = std::move(best);
  return r;
}

/// Relative pose from a head output in scaled space: unscale, then
/// renormalize the quaternion. A vanishing quaternion is an error.
inline RelativePose decode_prediction(const PoseScaler& scaler, const PoseVector& scaled) {
  const PoseVector d = scaler.unscale(scaled);
  Quat q(d(3), d(4), d(5), d(6));
  if (!(q.norm() > 1e-9)) {
    fail(ErrorCategory::Degenerate, "pose regressor produced a zero-norm quaternion");
  }
  return RelativePose{canonicalize(q), Vec3(d(0), d(1), d(2))};
}

inline RelativePose predict_relative_pose(const PoseRegressor& r, const PoseScaler& scaler,
                                          const Vector& features_a, const Vector& features_b) {
  Matrix x(features_a.size() + features_b.size(), 1);
  x.col(0) << features_a, features_b;
  const Matrix out = head_forward(r, x);
  return decode_prediction(scaler, out.col(0));
}

// ---------------------------------------------------------------------------
// Serialization (the scaler travels with the head)

inline constexpr int kPoseModelVersion = 1;

inline void save_pose_model(const PoseRegressor& r, const PoseScaler& s, const std::filesystem::path& p) {
  TensorArchive a;
  a.meta["kind"] = "pose-regressor";
  a.meta["version"] = kPoseModelVersion;
  a.meta["dropout"] = r.dropout;
  a.meta["leak"] = r.leak;
  a.meta["branch_features"] = r.branch_features;
  a.meta["scaler"] = {{"d_min", std::vector<double>(s.d_min.data(), s.d_min.data() + 7)},
                      {"d_max", std::vector<double>(s.d_max.data(), s.d_max.data() + 7)},
                      {"sc_min", s.sc_min},
                      {"sc_max", s.sc_max},
                      {"pinned", s.pinned}};
  for (std::size_t l = 0; l < 3; ++l) {
    a.put("fc" + std::to_string(l) + ".weight", r.layers[l].weight);
    a.put("fc" + std::to_string(l) + ".bias", r.layers[l].bias);
  }
  a.save(p);
}

inline std::pair<PoseRegressor, PoseScaler> load_pose_model(const std::filesystem::path& p) {
  const auto a = TensorArchive::load(p);
  if (a.meta.value("kind", "") != "pose-regressor") {
    fail(ErrorCategory::Format, "tensor container does not hold a pose regressor");
  }
  io::check_version(a.meta.value("version", -1), kPoseModelVersion, "pose regressor");
  PoseRegressor r;
  r.dropout = a.meta.at("dropout");
  r.leak = a.meta.at("leak");
  r.branch_features = a.meta.at("branch_features");
  for (std::size_t l = 0; l < 3; ++l) {
    r.layers[l].weight = a.matrix("fc" + std::to_string(l) + ".weight");
    r.layers[l].bias = a.vector("fc" + std::to_string(l) + ".bias");
  }
  PoseScaler s;
  const auto& js = a.meta.at("scaler");
  const auto lo = js.at("d_min").get<std::vector<double>>();
  const auto hi = js.at("d_max").get<std::vector<double>>();
  require(lo.size() == 7 && hi.size() == 7, "pose regressor: malformed scaler", ErrorCategory::Format);
  s.d_min = Eigen::Map<const PoseVector>(lo.data());
  s.d_max = Eigen::Map<const PoseVector>(hi.data());
  s.sc_min = js.at("sc_min");
  s.sc_max = js.at("sc_max");
  s.pinned = js.at("pinned").get<std::array<bool, 7>>();
  s.validate();
  return {std::move(r), s};
}

}  // namespace biloop
