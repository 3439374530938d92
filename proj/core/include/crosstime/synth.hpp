#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crosstime/rng.hpp"

namespace crosstime {

/// Parameterization of the synthetic cross-lag dataset. Four sine sources
/// feed a lag-blended target; two random walks are causal distractors. The
/// target is built on a patch grid and overlapping patch regions are
/// averaged.
struct SynthSpec {
  struct Sine {
    double amplitude, frequency, phase;
  };
  struct Pair {
    int64_t src_a;  // 0-based source index
    int64_t lag_a;  // patch-grid lag, >= 1
    int64_t src_b;
    int64_t lag_b;
    double weight;  // pair weights sum to 1
  };

  int64_t n_points = 10000;
  std::vector<Sine> sines = {
      {1.0, 0.02, 0.0}, {3.0, 0.03, 0.5}, {2.0, 0.01, 1.0}, {5.0, 0.002, 1.5}};
  std::vector<double> walk_stds = {0.1, 0.15};
  int64_t patch_len = 16;
  int64_t stride = 8;
  int64_t blend_period = 20;  // patches
  std::vector<Pair> pairs = {{0, 1, 1, 2, 0.5}, {2, 2, 3, 3, 0.5}};
  double noise_std = 0.02;
  uint64_t seed = 2021;

  void validate() const;
  int64_t sources() const { return static_cast<int64_t>(sines.size() + walk_stds.size()); }
  int64_t max_lag() const;
};

/// Per-patch record of the blend: weight w(k), contributing source patch
/// indices, and the pre-noise target patch values.
struct BlendTrace {
  struct Entry {
    int64_t k;
    double w;
    std::vector<int64_t> source_patches;
    std::vector<double> values;  // patch_len target values before averaging
  };
  std::vector<Entry> entries;
};

/// sources()[i] is series i, length n_points: sines first, then the random
/// walks (cumulative sums of seeded Gaussian steps starting from 0).
std::vector<std::vector<double>> gen_sources(const SynthSpec& spec);

/// Triangle blend weight, 20-periodic by default:
/// w = (k mod p)/ (p/2) rising, then falling symmetrically.
double blend_weight(int64_t k, int64_t period = 20);

/// Builds the pre-noise target on the patch grid. Patches whose lags reach
/// before the series start contribute zeros; overlapping regions are averaged
/// per time step.
std::vector<double> build_target(const std::vector<std::vector<double>>& sources,
                                 const SynthSpec& spec, BlendTrace* trace = nullptr);

/// Adds seeded Gaussian noise to the target and writes the 7-column CSV
/// (var_1..var_6,target) with '#' comment lines echoing the parameters.
/// Byte-identical output for identical spec and seed.
void add_noise_emit(const std::vector<double>& target,
                    const std::vector<std::vector<double>>& sources,
                    const SynthSpec& spec, const std::string& path);

/// gen_sources + build_target + add_noise_emit.
void generate_synthetic_csv(const SynthSpec& spec, const std::string& path);

}  // namespace crosstime
