// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
//
//   acceptance [--configs DIR] [--work DIR] [--only N]...

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "biloop/biloop.hpp"
#include "oracles.hpp"

using namespace biloop;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct CriterionResult {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Context {
  fs::path configs;
  fs::path work;
  std::ostringstream log;  // pipeline chatter, kept out of the verdict lines
  double desk_setup_seconds = 0.0;
  double desk_pose_seconds = 0.0;
  bool desk_ready = false;
  std::string desk_error;
};

// ---------------------------------------------------------------------------

CriterionResult criterion_1(Context&) {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> n(1, 10), k(1, 5), d(1, 8);
  double worst = 0.0, worst_limit = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int N = n(rng), K = k(rng), D = d(rng);
    const oracle::Mat X = oracle::random_matrix(rng, N, D), C = oracle::random_matrix(rng, K, D);
    const LocalDescriptorSet set{X, 0};

    const auto hard = vlad_hard(set, C);
    const oracle::Mat Vh = oracle::vlad_hard_raw(X, C);
    worst = std::max(worst, (hard.residuals - Vh).cwiseAbs().maxCoeff());
    worst = std::max(worst, (hard.flat - oracle::normalize_or_zero(oracle::flatten(Vh))).cwiseAbs().maxCoeff());

    VladParams p;
    p.centers = C;
    p.weights = oracle::random_matrix(rng, K, D);
    p.biases = oracle::random_matrix(rng, K, 1);
    const auto soft = vlad_soft(set, p);
    const oracle::Mat Vs = oracle::vlad_soft_raw(X, p.weights, p.biases, C);
    worst = std::max(worst, (soft.residuals - Vs).cwiseAbs().maxCoeff());
    worst = std::max(worst, (soft.flat - oracle::normalize_or_zero(oracle::flatten(Vs))).cwiseAbs().maxCoeff());

    const auto sharp = vlad_soft(set, VladParams::from_centers(C, 1e8));
    worst_limit = std::max(worst_limit, (sharp.residuals - Vh).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-9 && worst_limit < 1e-6,
          "max |err| " + fmt(worst) + " (< 1e-9), soft->hard limit " + fmt(worst_limit) + " (< 1e-6)"};
}

CriterionResult criterion_2(Context&) {
  std::mt19937_64 rng(202);
  double worst_vlad = 0.0, worst_triplet = 0.0, worst_pose = 0.0;
  int active_triplets = 0;
  for (int i = 0; i < 50; ++i) {
    // normalized NetVLAD layer
    {
      const int N = 3 + i % 6, K = 2 + i % 4, D = 2 + i % 5;
      LocalDescriptorSet set{oracle::random_matrix(rng, N, D), 0};
      VladParams p = VladParams::from_centers(oracle::random_matrix(rng, K, D), 1.0);
      p.weights += oracle::random_matrix(rng, K, D, 0.3);
      const VladOptions opt{i % 2 == 1};
      const oracle::Vec g = oracle::random_matrix(rng, K * D, 1);
      const auto f = [&] { return g.dot(vlad_soft(set, p, opt).flat); };
      const auto grad = vlad_soft_backward(set, p, opt, vlad_soft_forward(set, p, opt), g);
      worst_vlad = std::max({worst_vlad,
                             oracle::max_relative_error(oracle::as_vector(grad.weights), oracle::numeric_gradient(p.weights, f)),
                             oracle::max_relative_error(grad.biases, oracle::numeric_gradient(p.biases, f)),
                             oracle::max_relative_error(oracle::as_vector(grad.centers), oracle::numeric_gradient(p.centers, f)),
                             oracle::max_relative_error(oracle::as_vector(grad.descriptors),
                                                        oracle::numeric_gradient(set.descriptors, f))});
    }
    // triplet loss through the whole embedding
    {
      const int K = 3, D = 4, E = 5;
      EmbeddingModel m;
      m.backend = Backend(PassthroughBackend{D});
      m.vlad = VladParams::from_centers(oracle::random_matrix(rng, K, D), 1.0);
      m.projection = oracle::random_matrix(rng, E, K * D);
      m.projection_bias = oracle::random_matrix(rng, E, 1, 0.1);
      const auto sample = [&](SampleId id) {
        return Sample{id, LocalDescriptorSet{oracle::random_matrix(rng, 6, D), id}, std::nullopt};
      };
      const Sample a = sample(0), pos = sample(1), neg = sample(2);
      const double margin = 1.0;
      const auto f = [&] { return triplet_loss(embed(m, a), embed(m, pos), embed(m, neg), margin); };
      if (f() > 1e-3) {
        ++active_triplets;
        const auto ca = embed_forward(m, a), cp = embed_forward(m, pos), cn = embed_forward(m, neg);
        const auto tg = triplet_loss_grad(ca.embedding, cp.embedding, cn.embedding, margin);
        auto g = ModelGradients::zeros_like(m);
        embed_backward(m, ca, tg.anchor, g);
        embed_backward(m, cp, tg.positive, g);
        embed_backward(m, cn, tg.negative, g);
        worst_triplet = std::max(
            {worst_triplet,
             oracle::max_relative_error(oracle::as_vector(g.projection), oracle::numeric_gradient(m.projection, f)),
             oracle::max_relative_error(g.projection_bias, oracle::numeric_gradient(m.projection_bias, f)),
             oracle::max_relative_error(oracle::as_vector(g.vlad_weights), oracle::numeric_gradient(m.vlad.weights, f)),
             oracle::max_relative_error(g.vlad_biases, oracle::numeric_gradient(m.vlad.biases, f)),
             oracle::max_relative_error(oracle::as_vector(g.vlad_centers), oracle::numeric_gradient(m.vlad.centers, f))});
      }
    }
    // pose head mean squared error
    {
      PoseRegressorConfig cfg;
      cfg.hidden = {7, 5};
      auto r = PoseRegressor::make(6, cfg, static_cast<std::uint64_t>(i));
      for (auto& l : r.layers) l.bias = oracle::random_matrix(rng, l.bias.size(), 1, 0.1);
      const oracle::Mat x = oracle::random_matrix(rng, 6, 4), target = oracle::random_matrix(rng, 7, 4);
      const auto f = [&] { return batch_mse(head_forward(r, x), target); };
      HeadCache cache;
      Matrix d_out;
      batch_mse(head_forward(r, x, nullptr, &cache), target, &d_out);
      const auto g = head_backward(r, cache, d_out);
      for (std::size_t l = 0; l < 3; ++l) {
        worst_pose = std::max({worst_pose,
                               oracle::max_relative_error(oracle::as_vector(g.weight[l]),
                                                          oracle::numeric_gradient(r.layers[l].weight, f)),
                               oracle::max_relative_error(g.bias[l], oracle::numeric_gradient(r.layers[l].bias, f))});
      }
    }
  }
  const bool ok = worst_vlad < 1e-4 && worst_triplet < 1e-4 && worst_pose < 1e-4 && active_triplets >= 25;
  return {ok, "max rel err vlad " + fmt(worst_vlad) + ", triplet " + fmt(worst_triplet) + " (" +
                  std::to_string(active_triplets) + " active), pose MSE " + fmt(worst_pose) + " (< 1e-4)"};
}

CriterionResult criterion_3(Context&) {
  TrajectorySpec spec;
  spec.shape = "sine";
  spec.length = 200.0;
  spec.spacing = 1.0;
  spec.sine_amplitude = 3.0;
  spec.sine_wavelength = 60.0;
  spec.position_noise = 0.05;
  spec.yaw_noise_deg = 2.0;
  const auto poses = generate_trajectory(spec, 303).poses;
  const CameraIntrinsics K;
  MiningConfig all;
  all.d_min = 2.0;
  all.d_max = 11.0;
  all.triplets_per_query = 1 << 20;
  MiningConfig sampled = all;
  sampled.triplets_per_query = 6;

  bool ok = poses.size() >= 400;
  std::string detail = std::to_string(poses.size()) + " poses;";
  for (auto mode : {Direction::Forward, Direction::Backward}) {
    std::set<std::pair<SampleId, SampleId>> want;
    std::map<SampleId, std::size_t> want_per_query;
    for (const auto& q : poses) {
      for (const auto& c : poses) {
        if (q.id != c.id &&
            oracle::in_view(q, c, K.fov_deg(), all.d_min, all.d_max, all.orient_tol_deg, mode == Direction::Backward)) {
          want.emplace(q.id, c.id);
          ++want_per_query[q.id];
        }
      }
    }
    std::set<std::pair<SampleId, SampleId>> got;
    for (const auto& t : mine_triplets(std::span<const CameraPose>(poses), K, all, mode, 3).triplets) {
      got.emplace(t.anchor, t.positive);
    }
    // the sampled miner must draw from the same sets, as many as allowed
    bool subset = true;
    std::map<SampleId, std::size_t> per_query;
    for (const auto& t : mine_triplets(std::span<const CameraPose>(poses), K, sampled, mode, 3).triplets) {
      subset &= want.count({t.anchor, t.positive}) == 1;
      ++per_query[t.anchor];
    }
    bool counts = per_query.size() == want_per_query.size();
    for (const auto& [q, n] : want_per_query) {
      counts &= per_query[q] == std::min<std::size_t>(n, static_cast<std::size_t>(sampled.triplets_per_query));
    }
    ok &= got == want && subset && counts && !want.empty();
    detail += std::string(detail.back() == ';' ? " " : ", ") + std::string(to_string(mode)) + " " + std::to_string(got.size()) + "/" +
              std::to_string(want.size()) + " pairs" + (got == want ? " equal" : " DIFFER") +
              (subset && counts ? "" : ", sampled set mismatch");
  }
  return {ok, detail};
}

CriterionResult criterion_4(Context&) {
  WorldConfig w;
  w.trajectory.length = 100;
  w.observe.pixel_noise = 0.0;
  const auto ds = build_synthetic_dataset(w, 404);
  const MiningConfig cfg;
  const auto mined = mine_triplets(std::span<const CameraPose>(ds.poses), ds.intrinsics, cfg, Direction::Forward, 404);
  double worst_exact = 0.0, worst_oracle = 0.0;
  std::size_t kept = 0, discarded = 0, tested = 0;
  const Quat tilt(Eigen::AngleAxisd(deg2rad(10.0), Vec3::UnitY()));
  for (const auto& t : mined.triplets) {
    const auto c = track_correspondences(ds, t.anchor, t.positive);
    if (c.world_in_anchor.empty()) continue;
    ++tested;
    const double thr = cfg.threshold_for(c.world_in_anchor.size());
    const auto v = validate_triplet_reprojection(t, c.world_in_anchor, c.tracked_in_positive, ds.intrinsics, thr);
    worst_exact = std::max(worst_exact, v.error);
    kept += v.keep;
    Triplet bad = t;
    bad.rel.q = (t.rel.q * tilt).normalized();
    const auto vb = validate_triplet_reprojection(bad, c.world_in_anchor, c.tracked_in_positive, ds.intrinsics, thr);
    discarded += !vb.keep;
    const double o = oracle::reprojection_error(c.tracked_in_positive, ds.intrinsics, oracle::rotation(bad.rel.q),
                                                bad.rel.t, c.world_in_anchor);
    worst_oracle = std::max(worst_oracle, std::abs(vb.error - o) / std::max(1.0, o));
  }
  const bool ok = tested > 100 && worst_exact < 1e-9 && kept == tested && discarded == tested && worst_oracle < 1e-9;
  return {ok, std::to_string(tested) + " triplets: zero-noise max E " + fmt(worst_exact) + ", kept " +
                  std::to_string(kept) + ", 10 deg discarded " + std::to_string(discarded) +
                  ", oracle rel diff " + fmt(worst_oracle)};
}

CriterionResult criterion_5(Context&) {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  std::vector<PoseVector> vs(100000);
  for (auto& v : vs) {
    for (int j = 0; j < 7; ++j) v(j) = u(rng);
  }
  const auto s = PoseScaler::fit(vs);
  double worst = 0.0;
  for (const auto& v : vs) worst = std::max(worst, (s.unscale(s.scale(v)) - v).cwiseAbs().maxCoeff());
  const PoseVector lo = s.scale(s.d_min), hi = s.scale(s.d_max);
  const bool exact = (lo.array() == 0.0).all() && (hi.array() == 1.0).all();
  return {worst < 1e-9 && exact, "1e5 vectors, max round-trip err " + fmt(worst) +
                                     (exact ? ", endpoints exactly 0 and 1" : ", endpoints NOT exact")};
}

// ---------------------------------------------------------------------------
// Desk-scale run shared by criteria 6, 8 and 10

void run_desk(Context& ctx, const fs::path& dir, double* setup_s, double* pose_s) {
  const auto cfg = load_config(ctx.configs / "small.json");
  fs::remove_all(dir);
  const pipeline::Run run(cfg, dir, ctx.log);
  for (const char* c : {"synth", "mine", "train-embed", "train-pose", "index", "localize", "eval"}) {
    const auto t0 = Clock::now();
    pipeline::run_command(run, c);
    const double dt = seconds_since(t0);
    if (std::string_view(c) == "train-pose") {
      if (pose_s) *pose_s = dt;
    } else if (setup_s) {
      *setup_s += dt;
    }
  }
}

bool ensure_desk(Context& ctx) {
  if (ctx.desk_ready || !ctx.desk_error.empty()) return ctx.desk_ready;
  try {
    run_desk(ctx, ctx.work / "desk_a", &ctx.desk_setup_seconds, &ctx.desk_pose_seconds);
    ctx.desk_ready = true;
  } catch (const std::exception& e) {
    ctx.desk_error = e.what();
  }
  return ctx.desk_ready;
}

CriterionResult criterion_6(Context& ctx) {
  if (!ensure_desk(ctx)) return {false, "pipeline failed: " + ctx.desk_error};
  const auto cfg = load_config(ctx.configs / "small.json");
  const auto& w = cfg.world;
  const bool scenario = w.trajectory.length >= 200.0 && !w.landmarks.repetitive && w.observe.descriptor_noise > 0.0 &&
                        cfg.eval.label_rule == "overlap";
  const auto report = ctx.work / "desk_a" / "report";
  std::ifstream ff(report / ("pr_" + cfg.name + "-forward.csv")), fb(report / ("pr_" + cfg.name + "-backward.csv"));
  const double fwd = read_pr_csv(ff).auc, bwd = read_pr_csv(fb).auc;
  const double total = ctx.desk_setup_seconds;
  return {scenario && fwd >= 0.90 && bwd >= 0.80 && total < 600.0,
          "AUC forward " + fmt(fwd) + " (>= 0.90), backward " + fmt(bwd) + " (>= 0.80), " +
              fmt(w.trajectory.length) + " m out-and-back, noise " + fmt(w.observe.descriptor_noise) +
              ", pipeline " + fmt(total, 3) + " s"};
}

CriterionResult criterion_7(Context& ctx) {
  const auto base = load_config(ctx.configs / "repetitive.json");
  constexpr int kSeeds = 33;
  std::size_t fp = 0, fp_rejected = 0, tp = 0, tp_kept = 0;
  double decide_seconds = 0.0;
  for (int s = 1; s <= kSeeds; ++s) {
    auto cfg = base;
    cfg.seed = static_cast<std::uint64_t>(s);
    const auto dir = ctx.work / ("repetitive_" + std::to_string(s));
    fs::remove_all(dir);
    const pipeline::Run run(cfg, dir, ctx.log);
    for (const char* c : {"synth", "mine", "train-embed", "index"}) pipeline::run_command(run, c);

    const auto t0 = Clock::now();
    const auto ds = pipeline::load_dataset(run);
    const auto index = load_index(run.path("index"));
    const auto results = causal_loop_detect(pipeline::stream_from_index(index), cfg.loop);
    const GroundTruth gt(ds, cfg.eval);
    const auto sum = pipeline::summarize_loop_log(ds, gt, results);
    decide_seconds += seconds_since(t0);

    const std::size_t rejected_true = sum.rejected_confidence - sum.rejected_confidence_false;
    fp += (sum.accepted - sum.accepted_true) + sum.rejected_confidence_false;
    fp_rejected += sum.rejected_confidence_false;
    tp += sum.accepted_true + rejected_true;
    tp_kept += sum.accepted_true;
  }
  const double rej = fp ? double(fp_rejected) / double(fp) : 0.0;
  const double keep = tp ? double(tp_kept) / double(tp) : 0.0;
  const bool scenario = base.world.landmarks.repetitive && base.world.aliases.every > 0 &&
                        base.loop.confidence_anchors == 3 && base.loop.confidence_sharing;
  return {scenario && fp > 0 && rej >= 0.90 && keep >= 0.90 && decide_seconds < 60.0,
          std::to_string(kSeeds) + " worlds: false positives rejected " + std::to_string(fp_rejected) + "/" +
              std::to_string(fp) + " = " + fmt(rej, 3) + " (>= 0.90), true positives kept " +
              std::to_string(tp_kept) + "/" + std::to_string(tp) + " = " + fmt(keep, 3) +
              " (>= 0.90), detection " + fmt(decide_seconds, 3) + " s"};
}

CriterionResult criterion_8(Context& ctx) {
  if (!ensure_desk(ctx)) return {false, "pipeline failed: " + ctx.desk_error};
  const auto dir = ctx.work / "desk_a";
  const auto j = nlohmann::json::parse(slurp(dir / "pose_eval.json"));
  const double tt = j["trained"]["translation_m"], ta = j["trained"]["angular_deg"];
  const double ut = j["untrained"]["translation_m"], ua = j["untrained"]["angular_deg"];
  std::ifstream f(dir / "pose_predictions.csv");
  const auto records = read_pose_csv(f);
  double worst_norm = 0.0;
  for (const auto& r : records) worst_norm = std::max(worst_norm, std::abs(r.pred.q.norm() - 1.0));
  const bool ok = !records.empty() && tt <= 0.5 * ut && ta <= 0.5 * ua && worst_norm < 1e-9 &&
                  ctx.desk_pose_seconds < 600.0;
  return {ok, std::to_string(records.size()) + " held-out pairs: " + fmt(tt) + " m / " + fmt(ta) +
                  " deg vs untrained " + fmt(ut) + " m / " + fmt(ua) + " deg (<= 0.5x), max | |q|-1 | " +
                  fmt(worst_norm) + ", training " + fmt(ctx.desk_pose_seconds, 3) + " s"};
}

CriterionResult criterion_9(Context&) {
  std::mt19937_64 rng(909);
  std::uniform_int_distribution<int> level(0, 11);
  std::bernoulli_distribution coin(0.45);
  std::vector<double> s;
  std::vector<bool> l;
  std::vector<LabeledScore> in;
  for (int i = 0; i < 20; ++i) {
    s.push_back(level(rng) / 4.0);
    l.push_back(i < 2 ? i == 0 : coin(rng));
    in.push_back({0, i, s.back(), l.back()});
  }
  const auto c = pr_curve(in);
  bool exact = c.points.size() == std::set<double>(s.begin(), s.end()).size() + 1 && c.points[0].recall == 0.0 &&
               c.points[0].precision == 1.0;
  for (std::size_t k = 1; k < c.points.size(); ++k) {
    const auto m = oracle::confusion(s, l, c.points[k].threshold);
    exact &= c.points[k].precision == double(m.tp) / double(m.tp + m.fp) &&
             c.points[k].recall == double(m.tp) / double(m.tp + m.fn);
  }
  double worst = 0.0;
  std::uniform_real_distribution<double> a(0.2, 4.0), b(-5.0, 5.0);
  for (int t = 0; t < 10; ++t) {
    const double k = a(rng), off = b(rng);
    auto moved = in;
    for (auto& x : moved) {
      x.score = t % 3 == 0 ? k * x.score + off : t % 3 == 1 ? std::exp(k * x.score) + off : std::tanh(k * x.score / 4.0) + off;
    }
    worst = std::max(worst, std::abs(pr_curve(moved).auc - c.auc));
  }
  return {exact && worst < 1e-12, std::string(exact ? "20-point curve equals enumeration" : "curve DIFFERS") +
                                      ", AUC " + fmt(c.auc) + ", max change under 10 monotone maps " + fmt(worst)};
}

CriterionResult criterion_10(Context& ctx) {
  if (!ensure_desk(ctx)) return {false, "pipeline failed: " + ctx.desk_error};
  const auto a = ctx.work / "desk_a", b = ctx.work / "desk_b";
  run_desk(ctx, b, nullptr, nullptr);
  const bool manifest = slurp(a / "manifest.json") == slurp(b / "manifest.json");
  const bool loop = slurp(a / "loop_log.txt") == slurp(b / "loop_log.txt");
  const bool report = pipeline::content_hash(a / "report") == pipeline::content_hash(b / "report");
  bool files = true;
  for (const auto& e : fs::directory_iterator(a / "report")) {
    files &= slurp(e.path()) == slurp(b / "report" / e.path().filename());
  }
  return {manifest && loop && report && files, std::string("manifest ") + (manifest ? "identical" : "DIFFERS") +
                                                   ", loop log " + (loop ? "identical" : "DIFFERS") + ", report " +
                                                   (report && files ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Context ctx;
  std::string configs = "configs", work = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--configs", configs, "Directory with small.json and repetitive.json");
  app.add_option("--work", work, "Scratch directory for pipeline runs");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  ctx.configs = configs;
  ctx.work = work;
  fs::create_directories(ctx.work);

  const std::vector<std::pair<int, std::function<CriterionResult(Context&)>>> criteria = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {4, criterion_4}, {5, criterion_5},
      {6, criterion_6}, {7, criterion_7}, {8, criterion_8}, {9, criterion_9}, {10, criterion_10}};
  const std::map<int, double> budget = {{1, 10}, {2, 60}, {3, 30}, {4, 10}, {5, 5}, {9, 5}};

  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = Clock::now();
    CriterionResult v;
    try {
      v = fn(ctx);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double dt = seconds_since(t0);
    if (auto it = budget.find(id); it != budget.end() && dt >= it->second) {
      v.pass = false;
      v.detail += ", over the " + fmt(it->second) + " s budget";
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << v.detail << " [" << std::fixed
              << std::setprecision(2) << dt << " s]" << std::defaultfloat << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
