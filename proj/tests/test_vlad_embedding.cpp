#include <gtest/gtest.h>

#include <random>

#include "biloop/biloop.hpp"
#include "oracles.hpp"

using namespace biloop;

namespace {

LocalDescriptorSet as_set(const Matrix& X) { return LocalDescriptorSet{X, 0}; }

struct Instance {
  Matrix X, C;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n(1, 10), k(1, 5), d(1, 8);
  const int N = n(rng), K = k(rng), D = d(rng);
  return {oracle::random_matrix(rng, N, D), oracle::random_matrix(rng, K, D)};
}

}  // namespace

TEST(Vlad, HardMatchesDefiningSum) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto [X, C] = random_instance(rng);
    const auto out = vlad_hard(as_set(X), C);
    const Matrix V = oracle::vlad_hard_raw(X, C);
    EXPECT_LT((out.residuals - V).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((out.flat - oracle::normalize_or_zero(oracle::flatten(V))).cwiseAbs().maxCoeff(), 1e-9);
    const auto intra = vlad_hard(as_set(X), C, VladOptions{true});
    EXPECT_LT((intra.flat - oracle::normalize_or_zero(oracle::intra(V))).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Vlad, SoftMatchesDefiningSum) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto [X, C] = random_instance(rng);
    VladParams p;
    p.centers = C;
    p.weights = oracle::random_matrix(rng, C.rows(), C.cols());
    p.biases = oracle::random_matrix(rng, C.rows(), 1);
    const auto out = vlad_soft(as_set(X), p);
    const Matrix V = oracle::vlad_soft_raw(X, p.weights, p.biases, C);
    EXPECT_LT((out.residuals - V).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((out.flat - oracle::normalize_or_zero(oracle::flatten(V))).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Vlad, SoftApproachesHardForSharpAssignment) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto [X, C] = random_instance(rng);
    const auto hard = vlad_hard(as_set(X), C);
    const auto soft = vlad_soft(as_set(X), VladParams::from_centers(C, 1e4));
    EXPECT_LT((hard.residuals - soft.residuals).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Vlad, SingleClusterIsSumOfResiduals) {
  Matrix X(3, 2), C(1, 2);
  X << 1, 2, 3, 4, 5, 6;
  C << 1, 1;
  const auto out = vlad_hard(as_set(X), C);
  EXPECT_DOUBLE_EQ(out.residuals(0, 0), 6.0);
  EXPECT_DOUBLE_EQ(out.residuals(0, 1), 9.0);
  EXPECT_NEAR(out.flat.norm(), 1.0, 1e-12);
}

TEST(Vlad, DescriptorsOnCentresAreDegenerate) {
  Matrix C(2, 3);
  C << 1, 0, 0, 0, 1, 0;
  const auto out = vlad_hard(as_set(C), C);
  EXPECT_TRUE(out.degenerate);
  EXPECT_EQ(out.flat.norm(), 0.0);
}

TEST(Vlad, DimensionMismatchRejected) {
  EXPECT_THROW(vlad_hard(as_set(Matrix::Ones(2, 3)), Matrix::Ones(2, 4)), Error);
}

TEST(Vlad, OutputIsUnitOrZero) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto [X, C] = random_instance(rng);
    const double n = vlad_soft(as_set(X), VladParams::from_centers(C, 2.0)).flat.norm();
    EXPECT_TRUE(std::abs(n - 1.0) < 1e-12 || n == 0.0);
  }
}

TEST(Vlad, SoftGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    auto [X, C] = random_instance(rng);
    VladParams p = VladParams::from_centers(C, 1.0);
    p.weights += oracle::random_matrix(rng, C.rows(), C.cols(), 0.3);
    const VladOptions opt{i % 2 == 1};
    const oracle::Vec g = oracle::random_matrix(rng, C.rows() * C.cols(), 1);
    LocalDescriptorSet set = as_set(X);
    const auto loss = [&] { return g.dot(vlad_soft(set, p, opt).flat); };
    const auto cache = vlad_soft_forward(set, p, opt);
    if (cache.degenerate()) continue;
    const auto grad = vlad_soft_backward(set, p, opt, cache, g);
    EXPECT_LT(oracle::max_relative_error(oracle::as_vector(grad.weights), oracle::numeric_gradient(p.weights, loss)),
              1e-4);
    EXPECT_LT(oracle::max_relative_error(grad.biases, oracle::numeric_gradient(p.biases, loss)), 1e-4);
    EXPECT_LT(oracle::max_relative_error(oracle::as_vector(grad.centers), oracle::numeric_gradient(p.centers, loss)),
              1e-4);
    EXPECT_LT(oracle::max_relative_error(oracle::as_vector(grad.descriptors),
                                         oracle::numeric_gradient(set.descriptors, loss)),
              1e-4);
  }
}

// ---------------------------------------------------------------------------

namespace {

EmbeddingModel random_model(std::mt19937_64& rng, int K, int D, int E) {
  EmbeddingModel m;
  m.backend = Backend(PassthroughBackend{D});
  m.vlad = VladParams::from_centers(oracle::random_matrix(rng, K, D), 1.0);
  m.projection = oracle::random_matrix(rng, E, K * D);
  m.projection_bias = oracle::random_matrix(rng, E, 1, 0.1);
  return m;
}

Sample random_sample(std::mt19937_64& rng, SampleId id, int N, int D) {
  return Sample{id, LocalDescriptorSet{oracle::random_matrix(rng, N, D), id}, std::nullopt};
}

}  // namespace

TEST(Embedding, OutputIsUnitNorm) {
  std::mt19937_64 rng(6);
  const auto m = random_model(rng, 4, 5, 6);
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(embed(m, random_sample(rng, i, 7, 5)).norm(), 1.0, 1e-12);
}

TEST(Embedding, EmptySampleRejected) {
  std::mt19937_64 rng(7);
  const auto m = random_model(rng, 2, 3, 4);
  try {
    embed(m, Sample{1, LocalDescriptorSet{Matrix(0, 3), 1}, std::nullopt});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::EmptyInput);
  }
}

TEST(Embedding, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 20; ++i) {
    auto m = random_model(rng, 3, 4, 5);
    const auto s = random_sample(rng, 1, 6, 4);
    const oracle::Vec u = oracle::random_matrix(rng, 5, 1);
    const auto loss = [&] { return u.dot(embed(m, s)); };
    auto g = ModelGradients::zeros_like(m);
    embed_backward(m, embed_forward(m, s), u, g);
    EXPECT_LT(oracle::max_relative_error(oracle::as_vector(g.projection), oracle::numeric_gradient(m.projection, loss)),
              1e-4);
    EXPECT_LT(oracle::max_relative_error(g.projection_bias, oracle::numeric_gradient(m.projection_bias, loss)), 1e-4);
    EXPECT_LT(oracle::max_relative_error(oracle::as_vector(g.vlad_weights),
                                         oracle::numeric_gradient(m.vlad.weights, loss)),
              1e-4);
    EXPECT_LT(oracle::max_relative_error(g.vlad_biases, oracle::numeric_gradient(m.vlad.biases, loss)), 1e-4);
    EXPECT_LT(oracle::max_relative_error(oracle::as_vector(g.vlad_centers),
                                         oracle::numeric_gradient(m.vlad.centers, loss)),
              1e-4);
  }
}

TEST(Embedding, TripletLossGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  int active = 0;
  for (int i = 0; i < 50; ++i) {
    oracle::Vec a = oracle::random_matrix(rng, 6, 1), p = oracle::random_matrix(rng, 6, 1),
                n = oracle::random_matrix(rng, 6, 1);
    const double margin = 2.0;
    const auto g = triplet_loss_grad(a, p, n, margin);
    EXPECT_NEAR(g.loss, triplet_loss(a, p, n, margin), 1e-12);
    if (g.loss <= 1e-3) continue;
    ++active;
    const auto f = [&] { return triplet_loss(a, p, n, margin); };
    EXPECT_LT(oracle::max_relative_error(g.anchor, oracle::numeric_gradient(a, f)), 1e-4);
    EXPECT_LT(oracle::max_relative_error(g.positive, oracle::numeric_gradient(p, f)), 1e-4);
    EXPECT_LT(oracle::max_relative_error(g.negative, oracle::numeric_gradient(n, f)), 1e-4);
  }
  EXPECT_GT(active, 10);
}

TEST(Embedding, InactiveTripletHasZeroGradient) {
  const Vector a = Vector::Zero(3), p = Vector::Zero(3);
  Vector n = Vector::Zero(3);
  n(0) = 5.0;
  const auto g = triplet_loss_grad(a, p, n, 0.5);
  EXPECT_EQ(g.loss, 0.0);
  EXPECT_EQ(g.anchor.norm(), 0.0);
}

TEST(Embedding, ModelArchiveRoundTrip) {
  std::mt19937_64 rng(10);
  const auto m = random_model(rng, 3, 4, 5);
  const auto path = std::filesystem::temp_directory_path() / "biloop_model_roundtrip.bin";
  save_model(m, path);
  const auto back = load_embedding_model(path);
  // parameters are stored as 32-bit floats
  const auto f32 = [](const auto& x) -> Matrix { return x.template cast<float>().template cast<double>(); };
  EXPECT_EQ(back.projection, f32(m.projection));
  EXPECT_EQ(Matrix(back.projection_bias), f32(m.projection_bias));
  EXPECT_EQ(back.vlad.weights, f32(m.vlad.weights));
  EXPECT_EQ(Matrix(back.vlad.biases), f32(m.vlad.biases));
  EXPECT_EQ(back.vlad.centers, f32(m.vlad.centers));
  const auto s = random_sample(rng, 1, 5, 4);
  EXPECT_LT((embed(m, s) - embed(back, s)).norm(), 1e-5);
  std::filesystem::remove(path);
}

TEST(Embedding, InitModelIsDeterministic) {
  WorldConfig w;
  w.trajectory.length = 30;
  const auto ds = build_synthetic_dataset(w, 3);
  std::vector<Sample> corpus;
  for (const auto& s : ds.samples) {
    if (!s.descriptors.empty()) corpus.push_back(s);
  }
  InitConfig cfg;
  cfg.clusters = 4;
  cfg.embedding_dim = 8;
  const auto a = init_model(corpus, Backend(PassthroughBackend{w.landmarks.dim}), cfg, 9);
  const auto b = init_model(corpus, Backend(PassthroughBackend{w.landmarks.dim}), cfg, 9);
  EXPECT_EQ(a.vlad.centers, b.vlad.centers);
  EXPECT_EQ(a.projection, b.projection);
}

TEST(Embedding, TrainingSeparatesOverlappingFromDisjointViews) {
  WorldConfig w;
  w.trajectory.length = 80;
  w.observe.descriptor_noise = 0.3;
  const auto ds = build_synthetic_dataset(w, 4);
  MiningConfig mining;
  std::vector<Triplet> ts;
  for (auto mode : {Direction::Forward, Direction::Backward}) {
    auto r = mine_triplets(ds, mining, mode, 4);
    ts.insert(ts.end(), r.triplets.begin(), r.triplets.end());
  }
  ASSERT_FALSE(ts.empty());
  std::vector<Sample> corpus;
  for (const auto& s : ds.samples) {
    if (!s.descriptors.empty()) corpus.push_back(s);
  }
  InitConfig ic;
  ic.clusters = 8;
  ic.embedding_dim = 32;
  const auto init = init_model(corpus, Backend(PassthroughBackend{w.landmarks.dim}), ic, 4);
  TrainConfig tc;
  tc.epochs = 6;
  tc.learning_rate = 1e-3;
  const SampleIndex samples(ds.samples);
  const auto trained = train_embedding(init, ts, samples, tc, 4);
  EXPECT_LT(trained.history.train.back(), trained.history.train.front());

  // a backward query against a strongly overlapping and a disjoint forward view
  const auto vis = ds.ground_truth_visibility();
  int closer = 0, total = 0;
  for (std::size_t q = 0; q < ds.size(); q += 3) {
    if (ds.legs[q] != Direction::Backward || ds.samples[q].descriptors.empty()) continue;
    std::optional<std::size_t> hi, lo;
    for (std::size_t d = 0; d < ds.size(); ++d) {
      if (ds.legs[d] != Direction::Forward || ds.samples[d].descriptors.empty()) continue;
      const double j = jaccard(vis[q], vis[d]);
      if (j >= 0.5 && !hi) hi = d;
      if (j == 0.0 && (ds.poses[d].t - ds.poses[q].t).norm() > 40.0 && !lo) lo = d;
    }
    if (!hi || !lo) continue;
    const auto fq = embed(trained.model, ds.samples[q]);
    closer += (fq - embed(trained.model, ds.samples[*hi])).norm() <
              (fq - embed(trained.model, ds.samples[*lo])).norm();
    ++total;
  }
  ASSERT_GT(total, 5);
  EXPECT_GE(double(closer) / total, 0.9);
}
