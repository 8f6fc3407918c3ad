#pragma once

// Place-recognition embedding: backend -> soft VLAD -> linear projection ->
// L2 normalization, with model initialization (k-means centres, PCA
// projection), the triplet margin loss and end-to-end gradients.

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "biloop/backend.hpp"
#include "biloop/optim.hpp"
#include "biloop/rng.hpp"
#include "biloop/tensor_io.hpp"
#include "biloop/vlad.hpp"

namespace biloop {

struct EmbeddingModel {
  Backend backend;
  VladParams vlad;
  VladOptions vlad_options;
  Matrix projection;  // E x (K * D)
  Vector projection_bias;  // E

  Eigen::Index embedding_dim() const { return projection.rows(); }
  Eigen::Index clusters() const { return vlad.clusters(); }
  Eigen::Index descriptor_dim() const { return vlad.dim(); }
};

/// Lloyd's k-means with k-means++ seeding. Rows of `points` are samples.
inline Matrix kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 50) {
  require(k >= 1, "kmeans: k must be positive");
  require(points.rows() >= k, "kmeans: fewer points than clusters");
  Rng rng = make_rng(seed, "kmeans");
  const Eigen::Index n = points.rows();

  Matrix centers(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = points.row(pick(rng));
  Vector d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (chosen = 0; chosen < n - 1; ++chosen) {
        r -= d2(chosen);
        if (r <= 0.0) break;
      }
    } else {
      chosen = pick(rng);
    }
    centers.row(c) = points.row(chosen);
    d2 = d2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  std::vector<int> label(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    Vector best_d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (points.row(i) - centers.row(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      best_d(i) = bd;
      if (label[static_cast<std::size_t>(i)] != best) {
        label[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(label[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centers.row(c) = sums.row(c) / double(counts[static_cast<std::size_t>(c)]);
      } else {
        // re-seed an empty cluster at the worst-served point
        Eigen::Index far;
        best_d.maxCoeff(&far);
        centers.row(c) = points.row(far);
        best_d(far) = 0.0;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return centers;
}

/// Top principal directions of the rows of `data` as orthonormal rows.
/// When the data has fewer directions than requested, the remainder is
/// completed with a seeded orthonormal basis of the complement.
inline Matrix principal_components(const Matrix& data, Eigen::Index count, std::uint64_t seed,
                                   Vector* mean_out = nullptr) {
  const Eigen::Index dim = data.cols();
  require(count >= 1 && count <= dim, "pca: component count must be in [1, dimension]");
  const Vector mean = data.colwise().mean().transpose();
  if (mean_out) *mean_out = mean;
  const Matrix centered = data.rowwise() - mean.transpose();

  Matrix basis(count, dim);
  Eigen::Index filled = 0;
  if (centered.rows() > 1) {
    Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double tol = sv.size() ? sv(0) * 1e-10 : 0.0;
    for (Eigen::Index i = 0; i < sv.size() && filled < count; ++i) {
      if (sv(i) <= tol) break;
      basis.row(filled++) = svd.matrixV().col(i).transpose();
    }
  }
  if (filled < count) {
    Rng rng = make_rng(seed, "pca_complement");
    std::normal_distribution<double> g(0.0, 1.0);
    while (filled < count) {
      Vector v(dim);
      for (Eigen::Index j = 0; j < dim; ++j) v(j) = g(rng);
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index r = 0; r < filled; ++r) v -= basis.row(r).dot(v) * basis.row(r).transpose();
      }
      const double n = v.norm();
      if (n < 1e-8) continue;
      basis.row(filled++) = (v / n).transpose();
    }
  }
  return basis;
}

struct InitConfig {
  int clusters = 64;          // K
  int embedding_dim = 4096;   // E
  double alpha = 10.0;        // sharpness of the initial soft assignment
  bool intra_normalize = false;
  int max_descriptors = 20000;
  int max_pca_samples = 2000;
  int kmeans_iterations = 50;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(InitConfig, clusters, embedding_dim, alpha,
                                                intra_normalize, max_descriptors, max_pca_samples,
                                                kmeans_iterations)

/// Builds a model from a corpus of samples: k-means centres on sampled local
/// descriptors, soft-assignment weights from the hard-assignment limit, and a
/// PCA-initialized projection of the corpus VLAD vectors.
inline EmbeddingModel init_model(const std::vector<Sample>& corpus, Backend backend,
                                 const InitConfig& cfg, std::uint64_t seed) {
  require(!corpus.empty(), "init_model: empty corpus", ErrorCategory::EmptyInput);
  require(cfg.clusters >= 1 && cfg.embedding_dim >= 1, "init_model: K and E must be positive");

  std::vector<LocalDescriptorSet> sets;
  sets.reserve(corpus.size());
  Eigen::Index total = 0;
  for (const auto& s : corpus) {
    if (!backend.trainable() && s.descriptors.empty()) continue;
    sets.push_back(backend.extract(s));
    total += sets.back().count();
  }
  require(total > 0, "init_model: corpus has no descriptors", ErrorCategory::EmptyInput);
  const Eigen::Index D = sets.front().dim();

  // sample descriptor rows without replacement
  std::vector<std::pair<std::size_t, Eigen::Index>> rows;
  rows.reserve(static_cast<std::size_t>(total));
  for (std::size_t s = 0; s < sets.size(); ++s)
    for (Eigen::Index r = 0; r < sets[s].count(); ++r) rows.emplace_back(s, r);
  Rng rng = make_rng(seed, "init_sample");
  if (static_cast<Eigen::Index>(rows.size()) > cfg.max_descriptors) {
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(static_cast<std::size_t>(cfg.max_descriptors));
  }
  Matrix pts(static_cast<Eigen::Index>(rows.size()), D);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    pts.row(static_cast<Eigen::Index>(i)) = sets[rows[i].first].descriptors.row(rows[i].second);
  }

  {
    std::set<std::vector<double>> distinct;
    for (Eigen::Index i = 0; i < pts.rows() && static_cast<int>(distinct.size()) < cfg.clusters; ++i) {
      std::vector<double> row(static_cast<std::size_t>(D));
      for (Eigen::Index j = 0; j < D; ++j) row[static_cast<std::size_t>(j)] = pts(i, j);
      distinct.insert(std::move(row));
    }
    require(static_cast<int>(distinct.size()) >= cfg.clusters,
            "init_model: K = " + std::to_string(cfg.clusters) +
                " exceeds the number of distinct descriptors");
  }

  EmbeddingModel m;
  m.backend = std::move(backend);
  m.vlad_options.intra_normalize = cfg.intra_normalize;
  m.vlad = VladParams::from_centers(kmeans(pts, cfg.clusters, seed, cfg.kmeans_iterations), cfg.alpha);

  const Eigen::Index KD = m.vlad.clusters() * D;
  require(cfg.embedding_dim <= KD, "init_model: embedding dimension exceeds K * D");
  std::vector<std::size_t> order(sets.size());
  std::iota(order.begin(), order.end(), 0);
  if (static_cast<int>(order.size()) > cfg.max_pca_samples) {
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(cfg.max_pca_samples));
    std::sort(order.begin(), order.end());
  }
  Matrix vl(static_cast<Eigen::Index>(order.size()), KD);
  for (std::size_t i = 0; i < order.size(); ++i) {
    vl.row(static_cast<Eigen::Index>(i)) =
        vlad_soft(sets[order[i]], m.vlad, m.vlad_options).flat.transpose();
  }
  Vector mean;
  m.projection = principal_components(vl, cfg.embedding_dim, seed, &mean);
  m.projection_bias = -m.projection * mean;
  return m;
}

/// Forward-pass state of one sample, reused by the backward pass.
struct EmbedCache {
  Sample const* sample = nullptr;
  LocalDescriptorSet local;
  ConvCache conv;
  VladSoftCache vlad;
  Vector pre;         // projection output before normalization
  double pre_norm = 0.0;
  Vector embedding;
};

inline EmbedCache embed_forward(const EmbeddingModel& m, const Sample& s) {
  EmbedCache c;
  c.sample = &s;
  c.local = m.backend.extract(s, &c.conv);
  if (c.local.empty()) {
    fail(ErrorCategory::EmptyInput, "embed: sample " + std::to_string(s.id) + " has no descriptors");
  }
  c.vlad = vlad_soft_forward(c.local, m.vlad, m.vlad_options);
  c.pre = m.projection * c.vlad.flat() + m.projection_bias;
  c.pre_norm = c.pre.norm();
  c.embedding = c.pre_norm > kDegenerateNorm ? Vector(c.pre / c.pre_norm)
                                             : Vector(Vector::Zero(c.pre.size()));
  return c;
}

/// E-dimensional unit-norm embedding of a sample.
inline Vector embed(const EmbeddingModel& m, const Sample& s) { return embed_forward(m, s).embedding; }

struct ModelGradients {
  Matrix vlad_weights, vlad_centers, projection;
  Vector vlad_biases, projection_bias;
  BackendGradients backend;

  static ModelGradients zeros_like(const EmbeddingModel& m) {
    ModelGradients g;
    g.vlad_weights = Matrix::Zero(m.vlad.weights.rows(), m.vlad.weights.cols());
    g.vlad_centers = Matrix::Zero(m.vlad.centers.rows(), m.vlad.centers.cols());
    g.vlad_biases = Vector::Zero(m.vlad.biases.size());
    g.projection = Matrix::Zero(m.projection.rows(), m.projection.cols());
    g.projection_bias = Vector::Zero(m.projection_bias.size());
    if (const auto* c = m.backend.conv()) {
      g.backend.kernel = Matrix::Zero(c->kernel.rows(), c->kernel.cols());
      g.backend.bias = Vector::Zero(c->bias.size());
    }
    return g;
  }

  void scale(double s) {
    vlad_weights *= s;
    vlad_centers *= s;
    vlad_biases *= s;
    projection *= s;
    projection_bias *= s;
    if (backend.kernel.size()) backend.scale(s);
  }
};

/// Accumulates into `g` the gradient of a loss given dLoss/d(embedding).
inline void embed_backward(const EmbeddingModel& m, const EmbedCache& c, const Vector& upstream,
                           ModelGradients& g) {
  if (c.pre_norm <= kDegenerateNorm) return;
  const Vector& f = c.embedding;
  const Vector dpre = (upstream - f * f.dot(upstream)) / c.pre_norm;
  g.projection.noalias() += dpre * c.vlad.flat().transpose();
  g.projection_bias += dpre;
  const Vector dflat = m.projection.transpose() * dpre;
  const auto vg = vlad_soft_backward(c.local, m.vlad, m.vlad_options, c.vlad, dflat);
  g.vlad_weights += vg.weights;
  g.vlad_biases += vg.biases;
  g.vlad_centers += vg.centers;
  if (m.backend.trainable()) m.backend.backward(c.conv, vg.descriptors, g.backend);
}

/// Which parameter groups training may update.
struct TrainableGroups {
  bool backend = true;
  bool vlad = true;
  bool projection = true;
};

inline std::vector<ParamRef> parameter_refs(EmbeddingModel& m, const ModelGradients& g,
                                            const TrainableGroups& groups = {}) {
  std::vector<ParamRef> refs;
  if (groups.projection) {
    refs.push_back(param_ref(m.projection, g.projection));
    refs.push_back(param_ref(m.projection_bias, g.projection_bias));
  }
  if (groups.vlad) {
    refs.push_back(param_ref(m.vlad.weights, g.vlad_weights));
    refs.push_back(param_ref(m.vlad.biases, g.vlad_biases));
    refs.push_back(param_ref(m.vlad.centers, g.vlad_centers));
  }
  if (groups.backend) {
    if (auto* c = m.backend.conv()) {
      refs.push_back(param_ref(c->kernel, g.backend.kernel));
      refs.push_back(param_ref(c->bias, g.backend.bias));
    }
  }
  return refs;
}

// ---------------------------------------------------------------------------
// Triplet margin loss on unsquared Euclidean distances.

inline double triplet_loss(const Vector& fa, const Vector& fp, const Vector& fn, double margin) {
  return std::max(0.0, margin + (fa - fp).norm() - (fa - fn).norm());
}

struct TripletLossGrad {
  double loss = 0.0;
  Vector anchor, positive, negative;
};

inline TripletLossGrad triplet_loss_grad(const Vector& fa, const Vector& fp, const Vector& fn,
                                         double margin) {
  TripletLossGrad g;
  g.anchor = Vector::Zero(fa.size());
  g.positive = Vector::Zero(fa.size());
  g.negative = Vector::Zero(fa.size());
  const Vector dap = fa - fp, dan = fa - fn;
  const double np = dap.norm(), nn = dan.norm();
  g.loss = std::max(0.0, margin + np - nn);
  if (g.loss <= 0.0) return g;
  // the norm is not differentiable at zero; use the zero subgradient there
  const Vector up = np > kDegenerateNorm ? Vector(dap / np) : Vector(Vector::Zero(fa.size()));
  const Vector un = nn > kDegenerateNorm ? Vector(dan / nn) : Vector(Vector::Zero(fa.size()));
  g.anchor = up - un;
  g.positive = -up;
  g.negative = un;
  return g;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kEmbeddingModelVersion = 1;

inline TensorArchive to_archive(const EmbeddingModel& m) {
  TensorArchive a;
  a.meta["kind"] = "embedding-model";
  a.meta["version"] = kEmbeddingModelVersion;
  a.meta["backend"] = m.backend.kind();
  a.meta["intra_normalize"] = m.vlad_options.intra_normalize;
  a.put("vlad.centers", m.vlad.centers);
  a.put("vlad.weights", m.vlad.weights);
  a.put("vlad.biases", m.vlad.biases);
  a.put("projection.weight", m.projection);
  a.put("projection.bias", m.projection_bias);
  if (const auto* c = m.backend.conv()) {
    a.meta["conv"] = {{"dim", c->dim}, {"patch", c->patch}, {"stride", c->stride}, {"leak", c->leak}};
    a.put("backend.kernel", c->kernel);
    a.put("backend.bias", c->bias);
  } else {
    a.meta["descriptor_dim"] = m.backend.descriptor_dim();
  }
  return a;
}

inline EmbeddingModel embedding_from_archive(const TensorArchive& a) {
  if (a.meta.value("kind", "") != "embedding-model") {
    fail(ErrorCategory::Format, "tensor container does not hold an embedding model");
  }
  io::check_version(a.meta.value("version", -1), kEmbeddingModelVersion, "embedding model");
  EmbeddingModel m;
  m.vlad.centers = a.matrix("vlad.centers");
  m.vlad.weights = a.matrix("vlad.weights");
  m.vlad.biases = a.vector("vlad.biases");
  m.vlad.validate();
  m.vlad_options.intra_normalize = a.meta.value("intra_normalize", false);
  m.projection = a.matrix("projection.weight");
  m.projection_bias = a.vector("projection.bias");
  if (a.meta.value("backend", "") == "conv") {
    const auto& c = a.meta.at("conv");
    ConvBackend b;
    b.dim = c.at("dim");
    b.patch = c.at("patch");
    b.stride = c.at("stride");
    b.leak = c.at("leak");
    b.kernel = a.matrix("backend.kernel");
    b.bias = a.vector("backend.bias");
    m.backend = Backend(std::move(b));
  } else {
    m.backend = Backend(PassthroughBackend{a.meta.value("descriptor_dim", 0)});
  }
  return m;
}

inline void save_model(const EmbeddingModel& m, const std::filesystem::path& p) { to_archive(m).save(p); }

inline EmbeddingModel load_embedding_model(const std::filesystem::path& p) {
  return embedding_from_archive(TensorArchive::load(p));
}

}  // namespace biloop
