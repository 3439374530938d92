#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crosstime/data.hpp"
#include "crosstime/model.hpp"
#include "crosstime/tasks.hpp"

namespace crosstime {

/// Bias-corrected Adam. Moment buffers are laid out per parameter; a missing
/// gradient counts as zero.
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<Parameter>& params);
};

/// NaN gradients abort, naming the offending parameter.
void adam_step(std::vector<Parameter>& params, AdamState& state, double lr);

/// Cosine one-cycle: ramps from max_lr/div_factor to max_lr over the first
/// pct_start of the steps, then anneals to max_lr/final_div_factor.
struct OneCycleSchedule {
  double max_lr = 1e-3;
  int64_t total_steps = 0;
  double pct_start = 0.4;
  double div_factor = 25.0;
  double final_div_factor = 1e4;

  int64_t peak_step() const {
    return static_cast<int64_t>(pct_start * static_cast<double>(total_steps));
  }
  double lr(int64_t step) const;
};

struct RunConfig {
  uint64_t seed = 2021;
  int64_t epochs = 10;
  int64_t batch_size = 32;
  double learning_rate = 1e-3;
  double pct_start = 0.4;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double grad_clip = 0.0;  // 0 disables
  TaskType task = TaskType::kForecast;
  ForecastSetting setting;
  double mask_rate = 0.25;
  uint64_t eval_mask_seed = 7;  // evaluation masks are regenerated from this
  double alpha = 0.01;
  bool point_adjust = false;
  ModelConfig model;
};

/// Split, scaled and windowed data for one task.
struct TaskData {
  SeriesFrame train, val, test;  // scaled; val/test carry lookback context rows
  ChannelScaler scaler;
  int64_t lookback = 0;
  int64_t horizon = 0;  // 0 for reconstruction tasks
  std::vector<Window> train_windows, val_windows, test_windows;
  std::vector<int> test_labels;  // anomaly truth per test row; may be empty
};

TaskData prepare_task_data(const SeriesFrame& raw, const SplitSpec& split_spec,
                           const RunConfig& run);

struct EpochRow {
  int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mse = 0.0;
  double lr_last = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> history;
  int64_t best_epoch = 0;  // 1-based epoch with the lowest validation MSE
  std::vector<MetricReport> test_metrics;
};

/// Full run: seeded shuffling per epoch, one-cycle Adam steps, per-epoch
/// validation, best-checkpoint retention, final test evaluation with the
/// retained parameters. (seed, config, data) determine every bit of the
/// outcome.
TrainResult train(Model& model, const TaskData& data, const RunConfig& run);

/// Test metrics with the model's current parameters; the same code path the
/// end of train() uses, so a reloaded checkpoint reproduces them exactly.
std::vector<MetricReport> evaluate_test(const Model& model, const TaskData& data,
                                        const RunConfig& run);

struct SeedSweepResult {
  std::string metric;
  std::vector<uint64_t> seeds;
  std::vector<double> values;  // one per completed seed, in seed order
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
  double cv = 0.0;          // 100 * stddev / |mean|
  double confidence = 0.0;  // 100 - cv
  bool partial = false;     // some run failed; stats cover the completed ones
};

/// Independent runs over >= 2 seeds; the primary test metric is folded in
/// seed order.
SeedSweepResult seed_sweep(const TaskData& data, const RunConfig& base,
                           const std::vector<uint64_t>& seeds);

}  // namespace crosstime
