#pragma once

// Triplet-loss training of an EmbeddingModel with Adam, per-epoch learning
// rate decay and early stopping on validation loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "biloop/dataprep.hpp"
#include "biloop/embedding.hpp"
#include "biloop/optim.hpp"
#include "biloop/rng.hpp"

namespace biloop {

/// Id -> sample lookup over externally owned samples.
class SampleIndex {
 public:
  SampleIndex() = default;
  explicit SampleIndex(std::span<const Sample> samples) {
    for (const auto& s : samples) by_id_[s.id] = &s;
  }

  const Sample& at(SampleId id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) {
      fail(ErrorCategory::InvalidInput, "no observation for sample " + std::to_string(id));
    }
    return *it->second;
  }

  bool contains(SampleId id) const { return by_id_.count(id) != 0; }

 private:
  std::unordered_map<SampleId, const Sample*> by_id_;
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double lr_decay = 1.0;  // multiplier applied after every epoch
  double margin = 0.1;
  int patience = 5;
  double min_delta = 0.0;
  double val_fraction = 0.1;
  bool train_backend = true;
  bool train_vlad = true;
  bool train_projection = true;

  /// Large-scale schedule: start at 1e-7 and divide by ten every epoch.
  static TrainConfig slow_decay_schedule() {
    TrainConfig c;
    c.learning_rate = 1e-7;
    c.lr_decay = 0.1;
    return c;
  }

  void validate() const {
    require(epochs >= 0 && batch_size >= 1, "training: epochs >= 0 and batch_size >= 1 required");
    require(learning_rate > 0.0 && lr_decay > 0.0, "training: learning rate and decay must be positive");
    require(val_fraction >= 0.0 && val_fraction < 1.0, "training: val_fraction must be in [0, 1)");
    require(margin >= 0.0, "training: margin must be non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, learning_rate,
                                                lr_decay, margin, patience, min_delta, val_fraction,
                                                train_backend, train_vlad, train_projection)

struct LossHistory {
  std::vector<double> train;  // entry 0 is the untrained model
  std::vector<double> val;
  int best_epoch = 0;
  bool early_stopped = false;
};

struct TrainResult {
  EmbeddingModel model;
  LossHistory history;
};

struct TripletSplit {
  std::vector<Triplet> train;
  std::vector<Triplet> val;
};

/// Seeded shuffle split of triplets into training and held-out sets; the
/// relative order of triplets inside each part is preserved.
inline TripletSplit split_triplets(const std::vector<Triplet>& ts, double val_fraction,
                                   std::uint64_t seed) {
  std::vector<std::size_t> idx(ts.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, "split");
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * double(ts.size())));
  std::vector<bool> is_val(ts.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[idx[i]] = true;
  TripletSplit s;
  for (std::size_t i = 0; i < ts.size(); ++i) (is_val[i] ? s.val : s.train).push_back(ts[i]);
  return s;
}

/// Embeddings of every sample referenced by the triplets, computed once each.
inline std::map<SampleId, Vector> embed_referenced(const EmbeddingModel& m,
                                                   const std::vector<Triplet>& ts,
                                                   const SampleIndex& samples) {
  std::map<SampleId, Vector> out;
  for (const auto& t : ts) {
    for (SampleId id : {t.anchor, t.positive, t.negative}) {
      if (!out.count(id)) out.emplace(id, embed(m, samples.at(id)));
    }
  }
  return out;
}

/// Mean triplet loss over a set (the global loss divided by its size).
inline double mean_triplet_loss(const EmbeddingModel& m, const std::vector<Triplet>& ts,
                                const SampleIndex& samples, double margin) {
  if (ts.empty()) return 0.0;
  const auto emb = embed_referenced(m, ts, samples);
  double total = 0.0;
  for (const auto& t : ts) {
    total += triplet_loss(emb.at(t.anchor), emb.at(t.positive), emb.at(t.negative), margin);
  }
  return total / double(ts.size());
}

/// Gradient of the summed triplet loss of a batch with respect to all model
/// parameters. Each referenced sample is forwarded and back-propagated once.
inline double batch_gradient(const EmbeddingModel& m, std::span<const Triplet> batch,
                             const SampleIndex& samples, double margin, ModelGradients& g) {
  std::map<SampleId, EmbedCache> cache;
  std::map<SampleId, Vector> upstream;
  for (const auto& t : batch) {
    for (SampleId id : {t.anchor, t.positive, t.negative}) {
      if (!cache.count(id)) {
        cache.emplace(id, embed_forward(m, samples.at(id)));
        upstream.emplace(id, Vector::Zero(m.embedding_dim()));
      }
    }
  }
  double loss = 0.0;
  for (const auto& t : batch) {
    const auto lg = triplet_loss_grad(cache.at(t.anchor).embedding, cache.at(t.positive).embedding,
                                      cache.at(t.negative).embedding, margin);
    loss += lg.loss;
    if (lg.loss <= 0.0) continue;
    upstream.at(t.anchor) += lg.anchor;
    upstream.at(t.positive) += lg.positive;
    upstream.at(t.negative) += lg.negative;
  }
  for (const auto& [id, c] : cache) {
    const auto& u = upstream.at(id);
    if (u.squaredNorm() > 0.0) embed_backward(m, c, u, g);
  }
  return loss;
}

inline TrainResult train_embedding(EmbeddingModel model, const std::vector<Triplet>& triplets,
                                   const SampleIndex& samples, const TrainConfig& cfg,
                                   std::uint64_t seed) {
  cfg.validate();
  require(!triplets.empty(), "train_embedding: empty triplet manifest", ErrorCategory::EmptyInput);
  auto split = split_triplets(triplets, cfg.val_fraction, seed);
  if (split.train.empty()) split.train = split.val;
  const auto& val = split.val.empty() ? split.train : split.val;

  TrainResult r;
  const auto check = [](double v, int epoch) {
    if (!std::isfinite(v)) {
      fail(ErrorCategory::Divergence,
           "train_embedding: loss became non-finite at epoch " + std::to_string(epoch));
    }
  };
  r.history.train.push_back(mean_triplet_loss(model, split.train, samples, cfg.margin));
  r.history.val.push_back(mean_triplet_loss(model, val, samples, cfg.margin));
  check(r.history.val.back(), 0);

  const TrainableGroups groups{cfg.train_backend, cfg.train_vlad, cfg.train_projection};
  Adam adam(AdamConfig{cfg.learning_rate});
  EmbeddingModel best = model;
  double best_val = r.history.val.back();
  int wait = 0;
  std::vector<Triplet> order = split.train;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    adam.set_learning_rate(cfg.learning_rate * std::pow(cfg.lr_decay, epoch - 1));
    Rng rng = make_rng(seed, "train_embed_epoch", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto len = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      auto g = ModelGradients::zeros_like(model);
      const double loss = batch_gradient(model, std::span(order).subspan(start, len), samples, cfg.margin, g);
      check(loss, epoch);
      if (loss <= 0.0) continue;
      g.scale(1.0 / double(len));
      adam.step(parameter_refs(model, g, groups));
    }
    r.history.train.push_back(mean_triplet_loss(model, split.train, samples, cfg.margin));
    r.history.val.push_back(mean_triplet_loss(model, val, samples, cfg.margin));
    check(r.history.train.back(), epoch);
    check(r.history.val.back(), epoch);

    if (r.history.val.back() < best_val - cfg.min_delta) {
      best_val = r.history.val.back();
      best = model;
      r.history.best_epoch = epoch;
      wait = 0;
    } else if (++wait >= cfg.patience) {
      r.history.early_stopped = true;
      break;
    }
  }
  r.model = std::move(best);
  return r;
}

}  // namespace biloop
