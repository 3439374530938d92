#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crosstime/model.hpp"

namespace crosstime {

/// Analytic forward-pass FLOP estimate: 2*m*k*n per matmul, elementwise work
/// counted once per element. score_path covers the per-head attention-score
/// pipeline (scores, shift, mask, normalization, weighted values, and the
/// compressed value map when present).
struct FlopEstimate {
  double total = 0.0;
  double score_path = 0.0;
};

FlopEstimate estimate_forward_flops(const ModelConfig& cfg, int64_t batch = 1);

/// Exhaustive parameter-tensor enumeration of a freshly constructed model.
int64_t count_model_parameters(const ModelConfig& cfg);

struct ScalingPoint {
  int64_t swept_value = 0;
  int64_t tokens = 0;  // N = patches * channels
  int64_t params = 0;
  double flops_total = 0.0;
  double flops_score = 0.0;
};

struct ScalingReport {
  std::string variable;  // "n_features" or "seq_len"
  bool compressed = false;
  std::vector<ScalingPoint> points;
  double param_exponent = 0.0;       // growth vs tokens, top half of the sweep
  double score_flop_exponent = 0.0;  // growth vs tokens, top half of the sweep
};

/// Log-log least-squares slope over the top half (by x) of the sweep.
double fit_growth_exponent(const std::vector<double>& xs, const std::vector<double>& ys);

/// Constructs (never trains) a model per sweep value, counts parameters by
/// enumeration, and estimates FLOPs analytically. Full-attention points whose
/// total mask entries exceed mask_entry_cap are refused.
ScalingReport profile_scaling(const ModelConfig& base, const std::string& variable,
                              const std::vector<int64_t>& values,
                              int64_t mask_entry_cap = int64_t{1} << 25);

}  // namespace crosstime
