#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "crosstime/synth.hpp"

namespace crosstime::testing {

/// Independent brute-force target: per-time-step recomputation that never
/// touches the generator's patch-grid accumulation. The blend weight uses a
/// different (closed-form triangle) expression on purpose.
inline double oracle_blend_weight(int64_t k, int64_t period) {
  const int64_t half = period / 2;
  const int64_t r = k % period;
  return 1.0 - std::abs(static_cast<double>(r - half)) / static_cast<double>(half);
}

inline std::vector<double> oracle_target(const std::vector<std::vector<double>>& sources,
                                         const SynthSpec& spec) {
  const int64_t n = spec.n_points;
  const int64_t plen = spec.patch_len;
  const int64_t s = spec.stride;
  const int64_t n_patches = (n - plen) / s + 1;
  const int64_t min_k = spec.max_lag();
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  for (int64_t t = 0; t < n; ++t) {
    const int64_t num = t - plen + 1;
    const int64_t k_lo = num <= 0 ? 0 : (num + s - 1) / s;
    const int64_t k_hi = std::min(t / s, n_patches - 1);
    double acc = 0.0;
    int64_t cnt = 0;
    for (int64_t k = k_lo; k <= k_hi; ++k) {
      ++cnt;  // zero-contribution patches still enter the average
      if (k < min_k) continue;
      const double w = oracle_blend_weight(k, spec.blend_period);
      const int64_t j = t - k * s;
      for (const auto& pr : spec.pairs) {
        const double a = sources[static_cast<size_t>(pr.src_a)]
                                [static_cast<size_t>((k - pr.lag_a) * s + j)];
        const double b = sources[static_cast<size_t>(pr.src_b)]
                                [static_cast<size_t>((k - pr.lag_b) * s + j)];
        acc += pr.weight * (w * a + (1.0 - w) * b);
      }
    }
    if (cnt > 0) out[static_cast<size_t>(t)] = acc / static_cast<double>(cnt);
  }
  return out;
}

}  // namespace crosstime::testing
