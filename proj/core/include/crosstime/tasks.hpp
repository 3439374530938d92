#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crosstime/data.hpp"
#include "crosstime/tensor.hpp"

namespace crosstime {

enum class TaskType { kForecast, kImpute, kAnomaly };

std::string to_string(TaskType t);
TaskType task_from_string(const std::string& s);

/// Forecasting evaluates either all channels (M) or one designated target
/// channel (MS, multivariate-to-single).
struct ForecastSetting {
  bool ms = false;
  int64_t target_channel = 0;
};

/// Channel-shared flatten-linear head: one channel's P token embeddings are
/// concatenated (P * d_model) and mapped to the output length.
struct HeadParams {
  Tensor w;  // (P * d_model) x out_len
  Tensor b;  // out_len
};

HeadParams make_head(int64_t patches, int64_t d_model, int64_t out_len, Rng& rng);

/// Gathers channel c's tokens (flat indices p * C + c), concatenates, and
/// applies the shared linear map. tokens rows are (b, p, c); output rows are
/// (b, c) with out_len columns.
Tensor head_forward(const TokenBatch& tokens, const HeadParams& head);

/// Single-sample convenience returning the out_len x C orientation.
Tensor head_forward_sample(const TokenBatch& tokens, const HeadParams& head);

// ---- losses -----------------------------------------------------------------

/// MSE over all H x C entries (M) or the target channel's entries (MS).
Tensor forecast_loss(const Tensor& pred, const Tensor& truth,
                     const ForecastSetting& setting);

/// Same loss over the (b, c) x H rows layout used in batched training.
Tensor forecast_loss_rows(const Tensor& pred, const Tensor& truth, int64_t channels,
                          const ForecastSetting& setting);

/// MSE over masked positions only (mask[t,c] == 0 marks missing). With no
/// masked position the loss is defined as 0 and a warning is emitted.
Tensor masked_impute_loss(const Tensor& recon, const Tensor& truth, const Tensor& mask);

// ---- metric aggregation -------------------------------------------------------

/// One evaluation metric with batch-size-weighted aggregation; the weighted
/// value equals sum(value_i * size_i) / sum(size_i).
struct MetricReport {
  std::string name;
  double value = 0.0;
  int64_t count = 0;
  std::vector<std::pair<int64_t, double>> contributions;  // (size, value)
};

MetricReport weighted_metric_fold(const std::string& name,
                                  const std::vector<std::pair<int64_t, double>>& batches);

// ---- imputation protocol ------------------------------------------------------

struct ImputationResult {
  std::vector<double> filled;  // observed kept, reconstruction elsewhere
  double mse = 0.0;
  double mae = 0.0;
  int64_t masked_count = 0;
};

/// filled = observed o M + recon o (1 - M); metrics exclusively on the masked
/// set, against the uncorrupted truth.
ImputationResult fill_and_score_imputation(const std::vector<double>& observed,
                                           const std::vector<double>& recon,
                                           const std::vector<double>& mask,
                                           const std::vector<double>& truth);

// ---- anomaly protocol ---------------------------------------------------------

/// Per-time-step channel-summed squared reconstruction error.
std::vector<double> anomaly_scores(const std::vector<double>& truth,
                                   const std::vector<double>& recon, int64_t rows,
                                   int64_t cols);

/// Nearest-rank quantile: a member of the sorted sample at rank
/// ceil(q * n) (1-indexed).
double nearest_rank_quantile(std::vector<double> values, double q);

struct ThresholdResult {
  double tau = 0.0;
  std::vector<int> labels;  // per test score, 1 if score > tau
};

/// tau = quantile(train ∪ test, 1 - alpha); strict > labels anomalies.
ThresholdResult threshold_and_classify(const std::vector<double>& train_scores,
                                       const std::vector<double>& test_scores,
                                       double alpha);

/// Standard point-adjustment: a detected point inside a true anomalous
/// segment marks the whole segment detected. Off by default in the pipeline.
std::vector<int> point_adjust(const std::vector<int>& labels, const std::vector<int>& truth);

struct ClassificationMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0, accuracy = 0.0;
  bool degenerate = false;  // a zero denominator was hit and reported as 0
};

ClassificationMetrics classification_metrics(const std::vector<int>& labels,
                                             const std::vector<int>& truth);

}  // namespace crosstime
