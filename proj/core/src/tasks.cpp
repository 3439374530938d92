#include "crosstime/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace crosstime {

std::string to_string(TaskType t) {
  switch (t) {
    case TaskType::kForecast: return "forecast";
    case TaskType::kImpute: return "impute";
    case TaskType::kAnomaly: return "anomaly";
  }
  return "?";
}

TaskType task_from_string(const std::string& s) {
  if (s == "forecast") return TaskType::kForecast;
  if (s == "impute") return TaskType::kImpute;
  if (s == "anomaly") return TaskType::kAnomaly;
  throw ConfigError("unknown task \"" + s + "\"");
}

HeadParams make_head(int64_t patches, int64_t d_model, int64_t out_len, Rng& rng) {
  HeadParams h;
  const int64_t fan_in = patches * d_model;
  h.w = Tensor::randn({fan_in, out_len}, rng, std::sqrt(1.0 / static_cast<double>(fan_in)), true);
  h.b = Tensor::zeros({out_len}, true);
  return h;
}

Tensor head_forward(const TokenBatch& tb, const HeadParams& head) {
  const int64_t B = tb.batch, P = tb.patches, C = tb.channels, D = tb.d_model;
  if (tb.tokens.dim(0) != B * P * C || tb.tokens.dim(1) != D)
    throw ShapeError("head_forward: token layout mismatch, tokens are " +
                     shape_str(tb.tokens.shape()));
  if (head.w.dim(0) != P * D)
    throw ShapeError("head_forward: head expects " + std::to_string(head.w.dim(0)) +
                     " inputs but tokens provide " + std::to_string(P * D));
  // Row (b, c) <- concat over p of token (b, p, c).
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(B * C * P * D));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < P; ++p) {
        const int64_t row = b * P * C + p * C + c;
        for (int64_t j = 0; j < D; ++j) map->push_back(row * D + j);
      }
  Tensor flat = gather_flat(tb.tokens, std::move(map), {B * C, P * D});
  return add_bias(matmul(flat, head.w), head.b);
}

Tensor head_forward_sample(const TokenBatch& tb, const HeadParams& head) {
  if (tb.batch != 1)
    throw ShapeError("head_forward_sample expects batch 1, got " + std::to_string(tb.batch));
  Tensor rows = head_forward(tb, head);  // C x out_len
  return transpose(rows);               // out_len x C
}

// ---- losses -----------------------------------------------------------------

namespace {

Tensor mse_all(const Tensor& pred, const Tensor& truth) {
  Tensor d = sub(pred, truth);
  return mean(mul(d, d));
}

}  // namespace

Tensor forecast_loss(const Tensor& pred, const Tensor& truth, const ForecastSetting& setting) {
  if (pred.shape() != truth.shape())
    throw ShapeError("forecast_loss: prediction " + shape_str(pred.shape()) +
                     " vs truth " + shape_str(truth.shape()));
  if (!setting.ms) return mse_all(pred, truth);
  if (pred.rank() != 2)
    throw ShapeError("forecast_loss: MS setting expects H x C, got " + shape_str(pred.shape()));
  const int64_t h = pred.dim(0), c = pred.dim(1);
  if (setting.target_channel < 0 || setting.target_channel >= c)
    throw ConfigError("forecast_loss: target channel " + std::to_string(setting.target_channel) +
                      " out of " + std::to_string(c));
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(h));
  for (int64_t t = 0; t < h; ++t) map->push_back(t * c + setting.target_channel);
  return mse_all(gather_flat(pred, map, {h, 1}), gather_flat(truth, map, {h, 1}));
}

Tensor forecast_loss_rows(const Tensor& pred, const Tensor& truth, int64_t channels,
                          const ForecastSetting& setting) {
  if (pred.shape() != truth.shape())
    throw ShapeError("forecast_loss: prediction " + shape_str(pred.shape()) +
                     " vs truth " + shape_str(truth.shape()));
  if (!setting.ms) return mse_all(pred, truth);
  const int64_t rows = pred.dim(0);
  std::vector<int64_t> idx;
  for (int64_t r = setting.target_channel; r < rows; r += channels) idx.push_back(r);
  return mse_all(gather_rows(pred, idx), gather_rows(truth, idx));
}

Tensor masked_impute_loss(const Tensor& recon, const Tensor& truth, const Tensor& mask) {
  if (recon.shape() != truth.shape() || recon.shape() != mask.shape())
    throw ShapeError("masked_impute_loss: shapes " + shape_str(recon.shape()) + ", " +
                     shape_str(truth.shape()) + ", " + shape_str(mask.shape()) + " differ");
  int64_t missing = 0;
  const double* m = mask.data();
  for (int64_t i = 0; i < mask.numel(); ++i)
    if (m[i] == 0.0) ++missing;
  if (missing == 0) {
    std::cerr << "warning: masked_impute_loss with no masked positions; loss is 0\n";
    return Tensor::scalar(0.0);
  }
  std::vector<double> inv(static_cast<size_t>(mask.numel()));
  for (int64_t i = 0; i < mask.numel(); ++i) inv[static_cast<size_t>(i)] = m[i] == 0.0 ? 1.0 : 0.0;
  Tensor missing_sel = Tensor::from_vector(mask.shape(), std::move(inv));
  Tensor d = sub(recon, truth);
  return div(sum(mul(mul(d, d), missing_sel)), static_cast<double>(missing));
}

// ---- metric aggregation -------------------------------------------------------

MetricReport weighted_metric_fold(const std::string& name,
                                  const std::vector<std::pair<int64_t, double>>& batches) {
  if (batches.empty()) throw ConfigError("weighted_metric_fold: no batches");
  MetricReport r;
  r.name = name;
  double acc = 0.0;
  for (const auto& [size, value] : batches) {
    if (size < 1) throw ConfigError("weighted_metric_fold: batch size must be >= 1");
    acc += value * static_cast<double>(size);
    r.count += size;
    r.contributions.emplace_back(size, value);
  }
  r.value = acc / static_cast<double>(r.count);
  return r;
}

// ---- imputation protocol ------------------------------------------------------

ImputationResult fill_and_score_imputation(const std::vector<double>& observed,
                                           const std::vector<double>& recon,
                                           const std::vector<double>& mask,
                                           const std::vector<double>& truth) {
  const size_t n = observed.size();
  if (recon.size() != n || mask.size() != n || truth.size() != n)
    throw ShapeError("fill_and_score_imputation: array lengths differ");
  ImputationResult out;
  out.filled.resize(n);
  double se = 0.0, ae = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const bool observed_here = mask[i] != 0.0;
    out.filled[i] = observed_here ? observed[i] : recon[i];
    if (!observed_here) {
      const double d = truth[i] - recon[i];
      se += d * d;
      ae += std::abs(d);
      ++out.masked_count;
    }
  }
  if (out.masked_count > 0) {
    out.mse = se / static_cast<double>(out.masked_count);
    out.mae = ae / static_cast<double>(out.masked_count);
  }
  return out;
}

// ---- anomaly protocol ---------------------------------------------------------

std::vector<double> anomaly_scores(const std::vector<double>& truth,
                                   const std::vector<double>& recon, int64_t rows,
                                   int64_t cols) {
  if (truth.size() != recon.size() ||
      static_cast<int64_t>(truth.size()) != rows * cols)
    throw ShapeError("anomaly_scores: array lengths do not match rows x cols");
  std::vector<double> scores(static_cast<size_t>(rows), 0.0);
  for (int64_t t = 0; t < rows; ++t) {
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double d = truth[static_cast<size_t>(t * cols + c)] -
                       recon[static_cast<size_t>(t * cols + c)];
      s += d * d;
    }
    scores[static_cast<size_t>(t)] = s;
  }
  return scores;
}

double nearest_rank_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw NumericError("nearest_rank_quantile: empty sample");
  if (q < 0.0 || q > 1.0) throw NumericError("nearest_rank_quantile: q out of [0, 1]");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  int64_t rank = static_cast<int64_t>(std::ceil(q * n));
  rank = std::max<int64_t>(rank, 1);
  return values[static_cast<size_t>(rank - 1)];
}

ThresholdResult threshold_and_classify(const std::vector<double>& train_scores,
                                       const std::vector<double>& test_scores,
                                       double alpha) {
  if (alpha <= 0.0 || alpha >= 1.0)
    throw ConfigError("threshold: alpha must be in (0, 1), got " + std::to_string(alpha));
  std::vector<double> pooled;
  pooled.reserve(train_scores.size() + test_scores.size());
  pooled.insert(pooled.end(), train_scores.begin(), train_scores.end());
  pooled.insert(pooled.end(), test_scores.begin(), test_scores.end());
  if (pooled.empty()) throw NumericError("threshold: no scores to pool");
  ThresholdResult r;
  r.tau = nearest_rank_quantile(pooled, 1.0 - alpha);
  r.labels.reserve(test_scores.size());
  for (double s : test_scores) r.labels.push_back(s > r.tau ? 1 : 0);
  return r;
}

std::vector<int> point_adjust(const std::vector<int>& labels, const std::vector<int>& truth) {
  if (labels.size() != truth.size())
    throw ShapeError("point_adjust: label/truth lengths differ");
  std::vector<int> out = labels;
  const size_t n = labels.size();
  size_t i = 0;
  while (i < n) {
    if (truth[i] == 1) {
      size_t j = i;
      while (j < n && truth[j] == 1) ++j;
      bool hit = false;
      for (size_t t = i; t < j; ++t)
        if (labels[t] == 1) hit = true;
      if (hit)
        for (size_t t = i; t < j; ++t) out[t] = 1;
      i = j;
    } else {
      ++i;
    }
  }
  return out;
}

ClassificationMetrics classification_metrics(const std::vector<int>& labels,
                                             const std::vector<int>& truth) {
  if (labels.size() != truth.size())
    throw ShapeError("classification_metrics: label/truth lengths differ");
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1 && truth[i] == 1) ++tp;
    else if (labels[i] == 1) ++fp;
    else if (truth[i] == 1) ++fn;
    else ++tn;
  }
  ClassificationMetrics m;
  const auto safe_div = [&m](int64_t num, int64_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = safe_div(tp, tp + fp);
  m.recall = safe_div(tp, tp + fn);
  m.f1 = (m.precision + m.recall) > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  m.accuracy = safe_div(tp + tn, tp + tn + fp + fn);
  return m;
}

}  // namespace crosstime
