#pragma once

// Sweep of the positive-sample distance window: for each (d_min, d_max) cell
// mine triplets, train for a fixed budget and record training loss and the
// generalization gap on held-out triplets.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "biloop/dataprep.hpp"
#include "biloop/dataset.hpp"
#include "biloop/embedding.hpp"
#include "biloop/io_util.hpp"
#include "biloop/train_embedding.hpp"

namespace biloop {

struct SweepConfig {
  std::vector<std::array<double, 2>> cells = {{1, 6}, {2, 11}, {4, 15}};
  std::vector<std::string> modes = {"forward", "backward"};
  int min_triplets = 8;  // fewer mined triplets mark the cell empty

  void validate() const {
    require(!cells.empty(), "sweep: empty grid");
    for (const auto& c : cells) require(c[0] > 0.0 && c[0] < c[1], "sweep: every cell needs 0 < d_min < d_max");
    require(!modes.empty(), "sweep: no mining modes");
    for (const auto& m : modes) direction_from_string(m);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SweepConfig, cells, modes, min_triplets)

struct SweepCell {
  double d_min = 0.0;
  double d_max = 0.0;
  std::size_t triplets = 0;
  bool empty = false;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double gap = std::numeric_limits<double>::quiet_NaN();  // val_loss - train_loss
  std::optional<double> reference_loss;                  // loss on the common reference set
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::optional<std::size_t> argmin;
};

/// Mines both directions with the window of one cell.
inline std::vector<Triplet> mine_cell(const SequenceDataset& ds, MiningConfig mining, double d_min,
                                      double d_max, const std::vector<std::string>& modes,
                                      std::uint64_t seed) {
  mining.d_min = d_min;
  mining.d_max = d_max;
  std::vector<Triplet> all;
  for (const auto& m : modes) {
    auto r = mine_triplets(ds, mining, direction_from_string(m), seed);
    all.insert(all.end(), r.triplets.begin(), r.triplets.end());
  }
  return all;
}

/// Every cell starts from the same initial model and trains with the same
/// fixed budget (no early stopping). The argmin is the non-empty cell with
/// the lowest loss on `reference` when given, else on its own held-out split.
inline SweepResult range_sweep(const SequenceDataset& ds, const EmbeddingModel& initial,
                               const MiningConfig& mining, TrainConfig budget,
                               const SweepConfig& cfg, std::uint64_t seed,
                               const std::vector<Triplet>* reference = nullptr) {
  cfg.validate();
  budget.patience = std::numeric_limits<int>::max();
  const SampleIndex samples(ds.samples);
  SweepResult out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : cfg.cells) {
    SweepCell cell;
    cell.d_min = c[0];
    cell.d_max = c[1];
    const auto ts = mine_cell(ds, mining, c[0], c[1], cfg.modes, seed);
    cell.triplets = ts.size();
    cell.empty = ts.size() < static_cast<std::size_t>(std::max(cfg.min_triplets, 1));
    if (!cell.empty) {
      const auto r = train_embedding(initial, ts, samples, budget, seed);
      cell.train_loss = r.history.train.back();
      cell.val_loss = r.history.val.back();
      cell.gap = cell.val_loss - cell.train_loss;
      if (reference && !reference->empty()) {
        cell.reference_loss = mean_triplet_loss(r.model, *reference, samples, budget.margin);
      }
      const double key = cell.reference_loss.value_or(cell.val_loss);
      if (key < best) {
        best = key;
        out.argmin = out.cells.size();
      }
    }
    out.cells.push_back(cell);
  }
  return out;
}

inline constexpr int kSweepVersion = 1;

inline void write_sweep(std::ostream& os, const SweepResult& r) {
  io::write_header(os, "sweep", kSweepVersion);
  os << "d_min,d_max,triplets,empty,train_loss,val_loss,gap,reference_loss,argmin\n";
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    const auto& c = r.cells[i];
    os << c.d_min << ',' << c.d_max << ',' << c.triplets << ',' << (c.empty ? 1 : 0) << ',';
    if (c.empty) {
      os << "--,--,--,--";
    } else {
      os << c.train_loss << ',' << c.val_loss << ',' << c.gap << ',';
      if (c.reference_loss) os << *c.reference_loss; else os << "--";
    }
    os << ',' << (r.argmin == i ? 1 : 0) << '\n';
  }
}

}  // namespace biloop
