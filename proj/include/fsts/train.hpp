#pragma once

#include <functional>
#include <limits>
#include <vector>

#include <json.hpp>

#include "fsts/data.hpp"
#include "fsts/model.hpp"

namespace fsts {

// Adaptive-moment gradient descent state, one moment pair per parameter
// tensor in registry order.
struct OptimState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;

  static OptimState init(Model& model, double lr);
  // Consumes the gradients currently stored on the parameters (missing
  // gradients count as zero). Clips by global norm first.
  void apply(Model& model, double clip_norm);
};

void zero_grads(Model& model);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  Metrics val;
  double wall_seconds = 0.0;
};

struct HorizonReport {
  std::size_t steps = 0;
  Metrics m;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  std::vector<HorizonReport> test_horizons;
  Metrics test_average;
  double total_wall_seconds = 0.0;

  // Wall-clock fields are the only nondeterministic content; leave them out
  // to compare reports across runs.
  nlohmann::json to_json(bool include_wall_clock = true,
                         int interval_minutes = 5) const;
};

struct TrainOptions {
  std::size_t eval_batch = 64;
  bool verbose = false;
  std::size_t max_epochs_override = 0;  // 0: use config
  int interval_minutes = 5;             // for report labels only
  // Called after each epoch; return true to stop early.
  std::function<bool(const EpochRecord&)> stop_callback;
};

// The full training loop: seeded shuffled mini-batches, MAE loss on the
// normalized scale, gradient clipping, optimizer steps, per-epoch validation,
// best-checkpoint tracking with patience, final test evaluation at horizons
// 3/6/12 and the all-step average. The model is left holding the best
// parameters.
TrainReport train(Model& model, const SplitResult& splits,
                  const TrainOptions& opts = {});

struct EvalResult {
  std::vector<HorizonReport> horizons;
  Metrics average;
};

EvalResult evaluate(const Model& model, const WindowedSplit& split,
                    const NormStats& stats,
                    const std::vector<std::size_t>& horizons = {3, 6, 12},
                    std::size_t eval_batch = 64);

// The 15/30/60-minute horizons that actually fit in tau forecast steps.
std::vector<std::size_t> report_horizons(std::size_t output_steps);

// Predict-the-last-observed-value baseline on the same split.
EvalResult persistence_baseline(const WindowedSplit& split,
                                const std::vector<std::size_t>& horizons = {3, 6,
                                                                            12});

// Builds the model variant selected by the config's ablation flags.
Model apply_ablation(const ModelConfig& cfg);

}  // namespace fsts
