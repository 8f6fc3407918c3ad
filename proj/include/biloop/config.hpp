#pragma once

// Run configuration: everything a pipeline command needs, serializable as a
// single JSON document. Defaults are the full-scale settings (K = 64,
// D = 512, E = 4096, positives 2-11 m, 6 triplets per query); the bundled
// configs/small.json scales them down for a laptop.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "biloop/dataprep.hpp"
#include "biloop/dataset.hpp"
#include "biloop/embedding.hpp"
#include "biloop/error.hpp"
#include "biloop/evaluation.hpp"
#include "biloop/io_util.hpp"
#include "biloop/localization.hpp"
#include "biloop/posereg.hpp"
#include "biloop/sweep.hpp"
#include "biloop/train_embedding.hpp"

namespace biloop {

struct EmbeddingSettings {
  std::string backend = "passthrough";  // "passthrough" | "conv"
  int conv_dim = 64;
  int conv_patch = 5;
  int conv_stride = 4;
  InitConfig init;
  TrainConfig train;
  int max_triplets = 0;  // 0: use the whole manifest
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EmbeddingSettings, backend, conv_dim, conv_patch,
                                                conv_stride, init, train, max_triplets)

struct PoseSettings {
  PoseRegressorConfig regressor;
  int max_pairs = 0;  // 0: every unique manifest pair
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PoseSettings, regressor, max_pairs)

inline WorldConfig default_world() {
  WorldConfig w;
  w.landmarks.dim = 512;
  return w;
}

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::string dataset;  // external dataset directory; empty: the run's synthesized dataset
  WorldConfig world = default_world();
  MiningConfig mining;
  std::vector<std::string> mining_modes = {"forward", "backward"};
  EmbeddingSettings embedding;
  PoseSettings pose;
  LoopConfig loop;
  EvalConfig eval;
  SweepConfig sweep;

  void validate() const {
    require(!name.empty() && name.find_first_of("/\\ ") == std::string::npos,
            "config: run name must be a non-empty token without separators");
    mining.validate();
    require(!mining_modes.empty(), "config: no mining modes");
    for (const auto& m : mining_modes) direction_from_string(m);
    require(embedding.backend == "passthrough" || embedding.backend == "conv",
            "config: embedding.backend must be 'passthrough' or 'conv'");
    embedding.train.validate();
    pose.regressor.validate();
    loop.validate();
    eval.validate();
    sweep.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, name, seed, dataset, world, mining,
                                                mining_modes, embedding, pose, loop, eval, sweep)

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Format, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCategory::Format, "config '" + p.string() + "': " + e.what());
  }
  return config_from_json(j);
}

/// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string_view::npos && eq > 0, "override '" + std::string(assignment) + "' is not key=value");
  std::string path = "/" + std::string(assignment.substr(0, eq));
  for (auto& ch : path) {
    if (ch == '.') ch = '/';
  }
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  try {
    j[nlohmann::json::json_pointer(path)] = value;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::InvalidInput, "override '" + std::string(assignment) + "': " + e.what());
  }
}

}  // namespace biloop
