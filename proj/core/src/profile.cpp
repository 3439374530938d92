#include "crosstime/profile.hpp"

#include <cmath>

namespace crosstime {

FlopEstimate estimate_forward_flops(const ModelConfig& cfg, int64_t batch) {
  const auto B = static_cast<double>(batch);
  const double C = static_cast<double>(cfg.channels);
  const double P = static_cast<double>(patch_count(cfg.seq_len, cfg.patch));
  const double N = P * C;
  const double D = static_cast<double>(cfg.d_model);
  const double dh = static_cast<double>(cfg.d_model / cfg.n_heads);
  const double H = static_cast<double>(cfg.n_heads);
  const double dff = static_cast<double>(cfg.d_ff);
  const double plen = static_cast<double>(cfg.patch.patch_len);
  const double out_len = static_cast<double>(cfg.out_len);
  const bool decop = cfg.mode == AttentionMode::kCrabDecop;
  const double k = static_cast<double>(cfg.k);

  auto mm = [](double m, double kk, double n) { return 2.0 * m * kk * n; };

  FlopEstimate f;
  // Instance normalization: stats + affine, in and out.
  if (cfg.revin) f.total += 4.0 * C * static_cast<double>(cfg.seq_len) + 2.0 * C * out_len;
  // Patch embedding, positional add.
  f.total += mm(C * P, plen, D) + 2.0 * N * D;

  double per_layer = 0.0;
  double score = 0.0;
  // Per head: Q, K, V projections.
  per_layer += H * 3.0 * mm(N, D, dh);
  if (decop) {
    score += H * (mm(dh, N, k)      // S = K^T C
                  + mm(N, dh, k)    // A_c = Q S
                  + 3.0 * N * k     // normalization passes
                  + mm(k, N, dh)    // V = value_map X'
                  + mm(N, k, dh));  // O = W V
  } else {
    score += H * (mm(N, dh, N)      // scores
                  + 2.0 * N * N     // shift (min + subtract)
                  + N * N           // mask product
                  + 3.0 * N * N     // normalization passes
                  + mm(N, N, dh));  // weighted values
  }
  per_layer += score / 1.0;
  per_layer += mm(N, D, D);                            // output projection
  per_layer += mm(N, D, dff) + N * dff + mm(N, dff, D) + N * D;  // FFN + biases
  per_layer += N * dff;                                // gelu
  per_layer += 2.0 * 5.0 * N * D;                      // two layernorms
  per_layer += 2.0 * N * D;                            // residual adds

  f.total += static_cast<double>(cfg.e_layers) * per_layer;
  f.score_path = static_cast<double>(cfg.e_layers) * score * B;
  // Head: channel-shared linear over concatenated patch embeddings.
  f.total += mm(C, P * D, out_len) + C * out_len;
  f.total *= B;
  return f;
}

int64_t count_model_parameters(const ModelConfig& cfg) {
  Rng rng(0);
  Model model(cfg, rng);
  return model.parameter_count();
}

double fit_growth_exponent(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw NumericError("fit_growth_exponent: need >= 2 matched points");
  const size_t start = xs.size() / 2;  // top half of the sweep
  double mx = 0.0, my = 0.0;
  const size_t n = xs.size() - start;
  if (n < 2) throw NumericError("fit_growth_exponent: top half has < 2 points");
  for (size_t i = start; i < xs.size(); ++i) {
    mx += std::log(xs[i]);
    my += std::log(ys[i]);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double cov = 0.0, var = 0.0;
  for (size_t i = start; i < xs.size(); ++i) {
    const double dx = std::log(xs[i]) - mx;
    cov += dx * (std::log(ys[i]) - my);
    var += dx * dx;
  }
  if (var == 0.0) throw NumericError("fit_growth_exponent: degenerate sweep");
  return cov / var;
}

ScalingReport profile_scaling(const ModelConfig& base, const std::string& variable,
                              const std::vector<int64_t>& values, int64_t mask_entry_cap) {
  if (values.empty()) throw ConfigError("profile_scaling: empty sweep");
  if (variable != "n_features" && variable != "seq_len")
    throw ConfigError("profile_scaling: variable must be n_features or seq_len, got " + variable);
  ScalingReport report;
  report.variable = variable;
  report.compressed = base.mode == AttentionMode::kCrabDecop;
  for (int64_t v : values) {
    ModelConfig cfg = base;
    if (variable == "n_features")
      cfg.channels = v;
    else
      cfg.seq_len = v;
    const int64_t P = patch_count(cfg.seq_len, cfg.patch);
    const int64_t N = P * cfg.channels;
    if (!report.compressed && mode_uses_mask(cfg.mode)) {
      const int64_t mask_entries = N * N * cfg.n_heads * cfg.e_layers;
      if (mask_entries > mask_entry_cap)
        throw ConfigError("profile_scaling: point " + std::to_string(v) + " needs " +
                          std::to_string(mask_entries) +
                          " mask entries, above the cap of " + std::to_string(mask_entry_cap));
    }
    ScalingPoint pt;
    pt.swept_value = v;
    pt.tokens = N;
    pt.params = count_model_parameters(cfg);
    const FlopEstimate f = estimate_forward_flops(cfg);
    pt.flops_total = f.total;
    pt.flops_score = f.score_path;
    report.points.push_back(pt);
  }
  std::vector<double> xs, params, score;
  for (const auto& p : report.points) {
    xs.push_back(static_cast<double>(p.tokens));
    params.push_back(static_cast<double>(p.params));
    score.push_back(p.flops_score);
  }
  report.param_exponent = fit_growth_exponent(xs, params);
  report.score_flop_exponent = fit_growth_exponent(xs, score);
  return report;
}

}  // namespace crosstime
