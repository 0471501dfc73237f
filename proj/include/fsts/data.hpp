#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fsts/model.hpp"
#include "fsts/tensor.hpp"

namespace fsts {

// Time-major traffic series: values[s * num_nodes + j] is node j at step s.
struct TrafficDataset {
  std::string name;
  std::size_t num_steps = 0;
  std::size_t num_nodes = 0;
  int interval_minutes = 5;
  std::string start_rfc3339 = "1970-01-01T00:00:00";
  // Start-of-series calendar position, derived from the start timestamp.
  int start_minute_of_day = 0;
  int start_day_of_week = 0;  // 0 = Sunday
  std::vector<double> values;
  bool has_missing_sentinel = false;
  double missing_sentinel = 0.0;

  double at(std::size_t step, std::size_t node) const {
    return values[step * num_nodes + node];
  }
  // Slot of a step within the 1440 one-minute slots of a day.
  int tod_slot(std::size_t step) const;
  // Day-of-week slot of a step, 0..6.
  int dow_slot(std::size_t step) const;
};

// CSV: one row per time step, one column per node, optional header row.
// Sidecar JSON: {"name", "interval_minutes", "start", "missing_sentinel"?}.
TrafficDataset load_csv(const std::string& csv_path, const std::string& meta_path);

// Replaces NaN, sentinel and negative entries by per-node linear
// interpolation along time; leading/trailing gaps take the nearest valid
// value. A node with no valid entry at all is an error.
TrafficDataset clean(TrafficDataset ds);

struct NormStats {
  double mean = 0.0;
  double std = 1.0;

  double normalize(double x) const { return (x - mean) / std; }
  double denormalize(double z) const { return z * std + mean; }
};

enum class SplitRole { Train, Val, Test };

struct SampleView {
  std::size_t start = 0;  // first step of the input window
};

namespace detail {
struct SeriesStore;  // normalized + raw series shared by the three splits
}

// Sliding-window samples over a shared series. Sample i covers input steps
// [start, start+T) and target steps [start+T, start+T+tau).
class WindowedSplit {
 public:
  WindowedSplit() = default;
  WindowedSplit(std::shared_ptr<const detail::SeriesStore> store,
                std::vector<std::size_t> starts, SplitRole role);

  std::size_t size() const { return starts_.size(); }
  bool empty() const { return starts_.empty(); }
  SplitRole role() const { return role_; }
  std::size_t window_start(std::size_t i) const { return starts_.at(i); }

  struct Batch {
    Tensor x;       // [B,T,N,C] normalized input
    Tensor y_raw;   // [B,N,tau] raw-scale targets
    IntTensor tod;  // [B,T]
    IntTensor dow;  // [B,T]
  };
  Batch make_batch(std::span<const std::size_t> sample_ids) const;
  Batch make_batch_range(std::size_t first, std::size_t count) const;

  // Raw-scale value of the last observed input step (persistence forecast).
  double last_input_value(std::size_t i, std::size_t node) const;
  // Raw-scale target at forecast step h (0-based).
  double target_value(std::size_t i, std::size_t node, std::size_t h) const;

 private:
  std::shared_ptr<const detail::SeriesStore> store_;
  std::vector<std::size_t> starts_;
  SplitRole role_ = SplitRole::Train;
};

struct SplitResult {
  WindowedSplit train, val, test;
  NormStats stats;
  std::size_t window_count = 0;
};

// Windows the full cleaned series (count S - T - tau + 1), then partitions
// chronologically 60/20/20 by window index (floor for train and val, the
// remainder to test). Normalization statistics come from the train input
// windows only; inputs are normalized, targets stay in raw units. Passing
// stats_override (e.g. the stats a checkpoint was trained with) skips the
// computation and normalizes with those instead.
SplitResult split_and_window(const TrafficDataset& ds, std::size_t input_steps,
                             std::size_t output_steps,
                             const NormStats* stats_override = nullptr);

struct SynthConfig {
  std::size_t nodes = 8;
  std::size_t steps = 2016;
  int interval_minutes = 5;
  double base = 200.0;
  double daily_amplitude = 150.0;
  double weekly_modulation = 0.3;  // scales the stochastic part over the week
  double diffusion = 5.0;          // node-coupled AR noise strength
  double noise = 2.0;              // i.i.d. noise sigma
  std::string name = "synth";
};

// Deterministic synthetic traffic: a daily sinusoid per node (random phase
// and amplitude) plus weekly-modulated diffusion and i.i.d. noise, clamped
// at zero. With diffusion == noise == 0 the series is exactly periodic with
// period 1440/interval_minutes steps.
TrafficDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed);

void write_csv(const TrafficDataset& ds, const std::string& csv_path,
               const std::string& meta_path);

}  // namespace fsts
