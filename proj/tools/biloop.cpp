// biloop command-line driver.
//
//   biloop [--config FILE] [--run-dir DIR] [--seed N] [--set key.path=value]... <command> [options]
//
// Exit status is 0 on success, otherwise the error category code (see
// biloop/error.hpp); the category name is printed as `error[<category>]`.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "biloop/config.hpp"
#include "biloop/error.hpp"
#include "biloop/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

template <typename T>
void bind(CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help,
          std::vector<std::pair<std::string, std::optional<T>>>& sink) {
  sink.emplace_back(key, std::nullopt);
  const auto idx = sink.size() - 1;
  sub->add_option_function<T>(flag, [&sink, idx](const T& v) { sink[idx].second = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-directional loop closure: synthetic worlds, triplet mining, embedding and pose training, "
               "localization and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("-r,--run-dir", run_dir,
                 "Run directory (default: $BILOOP_RUN_DIR/<name>, or runs/<name>)");
  app.add_option("-s,--seed", seed, "Root seed for every random stream");
  app.add_option("--dataset", dataset, "External dataset directory instead of the synthesized one");
  app.add_option("--set", sets, "Config override key.path=value (repeatable)");

  std::vector<std::pair<std::string, std::optional<double>>> dbl;
  std::vector<std::pair<std::string, std::optional<int>>> ints;
  std::vector<std::pair<std::string, std::optional<std::string>>> strs;

  std::vector<CLI::App*> subs;
  const auto add = [&](const std::string& name, const std::string& help) {
    subs.push_back(app.add_subcommand(name, help));
    return subs.back();
  };

  auto* synth = add("synth", "Generate a synthetic out-and-back dataset");
  bind<double>(synth, "--length", "world.trajectory.length", "Path length of one leg, metres", dbl);
  bind<double>(synth, "--noise", "world.observe.descriptor_noise", "Descriptor noise level", dbl);

  auto* mine = add("mine", "Mine forward/backward training triplets");
  bind<double>(mine, "--d-min", "mining.d_min", "Nearest positive distance, metres", dbl);
  bind<double>(mine, "--d-max", "mining.d_max", "Farthest positive distance, metres", dbl);
  bind<int>(mine, "--per-query", "mining.triplets_per_query", "Triplets per query", ints);

  auto* train_embed = add("train-embed", "Train the place-recognition embedding");
  bind<int>(train_embed, "--epochs", "embedding.train.epochs", "Training epochs", ints);
  bind<double>(train_embed, "--lr", "embedding.train.learning_rate", "Initial learning rate", dbl);
  bind<double>(train_embed, "--margin", "embedding.train.margin", "Triplet margin", dbl);

  auto* train_pose = add("train-pose", "Train the relative pose regressor");
  bind<int>(train_pose, "--epochs", "pose.regressor.epochs", "Training epochs", ints);
  bind<double>(train_pose, "--lr", "pose.regressor.learning_rate", "Learning rate", dbl);

  add("index", "Embed every sample into the retrieval index");

  auto* localize = add("localize", "Causal loop-closure detection over the sequence");
  bind<double>(localize, "--tau", "loop.tau", "Minimum similarity score", dbl);
  bind<int>(localize, "--top-n", "loop.top_n", "Candidates per query", ints);
  bind<double>(localize, "--window", "loop.recency_window", "Recency exclusion window, metres", dbl);

  auto* eval = add("eval", "PR curves, pose errors and summary report");
  bind<std::string>(eval, "--label-rule", "eval.label_rule", "Ground-truth rule: overlap | in_view", strs);

  add("sweep", "Positive-distance window sweep");
  add("all", "Run synth, mine, train-embed, train-pose, index, localize and eval in order");

  CLI11_PARSE(app, argc, argv);

  try {
    nlohmann::json j = nlohmann::json(biloop::RunConfig{});
    if (!config_path.empty()) {
      try {
        j = nlohmann::json::parse(biloop::io::read_text_file(config_path));
      } catch (const nlohmann::json::parse_error& e) {
        biloop::fail(biloop::ErrorCategory::Format, "config '" + config_path + "': " + e.what());
      }
    }
    for (const auto& s : sets) biloop::apply_override(j, s);
    const auto apply = [&j](const auto& bound) {
      for (const auto& [k, v] : bound) {
        if (v) biloop::apply_override(j, k + "=" + nlohmann::json(*v).dump());
      }
    };
    apply(dbl);
    apply(ints);
    apply(strs);
    if (seed) j["seed"] = *seed;
    if (!dataset.empty()) j["dataset"] = dataset;
    const auto cfg = biloop::config_from_json(j);

    fs::path dir = run_dir;
    if (dir.empty()) {
      const char* root = std::getenv("BILOOP_RUN_DIR");
      dir = fs::path(root && *root ? root : "runs") / cfg.name;
    }
    const biloop::pipeline::Run run(cfg, dir, std::cerr);

    std::vector<std::string> commands;
    for (auto* s : subs) {
      if (s->parsed()) commands.push_back(s->get_name());
    }
    if (commands == std::vector<std::string>{"all"}) {
      commands = {"synth", "mine", "train-embed", "train-pose", "index", "localize", "eval"};
    }
    for (const auto& c : commands) {
      const auto t0 = std::chrono::steady_clock::now();
      biloop::pipeline::run_command(run, c);
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      std::cerr << c << ": done in " << dt.count() << " s (" << dir.string() << ")\n";
    }
    return 0;
  } catch (const biloop::Error& e) {
    std::cerr << "error[" << biloop::category_name(e.category()) << "]: " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error[format]: " << e.what() << "\n";
    return static_cast<int>(biloop::ErrorCategory::Format);
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
}
