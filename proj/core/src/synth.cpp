#include "crosstime/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "crosstime/errors.hpp"

namespace crosstime {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

// Distinct sub-streams: regenerating one never perturbs the others.
constexpr uint64_t kWalkStreamBase = 100;
constexpr uint64_t kNoiseStream = 900;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void SynthSpec::validate() const {
  if (n_points < patch_len) throw ConfigError("synth: n_points shorter than one patch");
  if (stride < 1 || stride > patch_len) throw ConfigError("synth: need 1 <= stride <= patch_len");
  if (blend_period < 2) throw ConfigError("synth: blend period must be >= 2");
  double wsum = 0.0;
  for (const auto& p : pairs) {
    if (p.lag_a < 1 || p.lag_b < 1) throw ConfigError("synth: lags must be >= 1");
    const int64_t n_src = static_cast<int64_t>(sines.size());
    if (p.src_a < 0 || p.src_a >= n_src || p.src_b < 0 || p.src_b >= n_src)
      throw ConfigError("synth: pair references a missing source");
    wsum += p.weight;
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw ConfigError("synth: pair weights must sum to 1");
  if (noise_std < 0.0) throw ConfigError("synth: negative noise std");
}

int64_t SynthSpec::max_lag() const {
  int64_t m = 0;
  for (const auto& p : pairs) m = std::max({m, p.lag_a, p.lag_b});
  return m;
}

std::vector<std::vector<double>> gen_sources(const SynthSpec& spec) {
  spec.validate();
  std::vector<std::vector<double>> out;
  for (const auto& s : spec.sines) {
    std::vector<double> v(static_cast<size_t>(spec.n_points));
    for (int64_t t = 0; t < spec.n_points; ++t)
      v[static_cast<size_t>(t)] =
          s.amplitude * std::sin(kTwoPi * s.frequency * static_cast<double>(t) + s.phase);
    out.push_back(std::move(v));
  }
  Rng root(spec.seed);
  for (size_t w = 0; w < spec.walk_stds.size(); ++w) {
    Rng walk = root.stream(kWalkStreamBase + w);
    std::vector<double> v(static_cast<size_t>(spec.n_points));
    double x = 0.0;  // initial value
    v[0] = x;
    for (int64_t t = 1; t < spec.n_points; ++t) {
      x += walk.normal(spec.walk_stds[w]);
      v[static_cast<size_t>(t)] = x;
    }
    out.push_back(std::move(v));
  }
  return out;
}

double blend_weight(int64_t k, int64_t period) {
  if (k < 0) throw ConfigError("blend_weight: k must be >= 0");
  const int64_t half = period / 2;
  const int64_t r = k % period;
  const double scaled = static_cast<double>(r) / static_cast<double>(half);
  return r <= half ? scaled : 2.0 - scaled;
}

std::vector<double> build_target(const std::vector<std::vector<double>>& sources,
                                 const SynthSpec& spec, BlendTrace* trace) {
  spec.validate();
  const int64_t n = spec.n_points;
  const int64_t plen = spec.patch_len;
  const int64_t stride = spec.stride;
  const int64_t n_patches = (n - plen) / stride + 1;
  const int64_t min_k = spec.max_lag();

  std::vector<double> acc(static_cast<size_t>(n), 0.0);
  std::vector<double> cnt(static_cast<size_t>(n), 0.0);
  for (int64_t k = 0; k < n_patches; ++k) {
    const double w = blend_weight(k, spec.blend_period);
    std::vector<double> patch(static_cast<size_t>(plen), 0.0);
    std::vector<int64_t> contributing;
    if (k >= min_k) {
      for (const auto& pr : spec.pairs) {
        const auto& a = sources[static_cast<size_t>(pr.src_a)];
        const auto& b = sources[static_cast<size_t>(pr.src_b)];
        const int64_t start_a = (k - pr.lag_a) * stride;
        const int64_t start_b = (k - pr.lag_b) * stride;
        for (int64_t j = 0; j < plen; ++j)
          patch[static_cast<size_t>(j)] +=
              pr.weight * (w * a[static_cast<size_t>(start_a + j)] +
                           (1.0 - w) * b[static_cast<size_t>(start_b + j)]);
        contributing.push_back(k - pr.lag_a);
        contributing.push_back(k - pr.lag_b);
      }
    }
    const int64_t start = k * stride;
    for (int64_t j = 0; j < plen; ++j) {
      acc[static_cast<size_t>(start + j)] += patch[static_cast<size_t>(j)];
      cnt[static_cast<size_t>(start + j)] += 1.0;
    }
    if (trace)
      trace->entries.push_back(BlendTrace::Entry{k, w, std::move(contributing), std::move(patch)});
  }
  std::vector<double> target(static_cast<size_t>(n), 0.0);
  for (int64_t t = 0; t < n; ++t)
    if (cnt[static_cast<size_t>(t)] > 0.0)
      target[static_cast<size_t>(t)] = acc[static_cast<size_t>(t)] / cnt[static_cast<size_t>(t)];
  return target;
}

void add_noise_emit(const std::vector<double>& target,
                    const std::vector<std::vector<double>>& sources,
                    const SynthSpec& spec, const std::string& path) {
  spec.validate();
  const int64_t n = spec.n_points;
  for (const auto& s : sources)
    if (static_cast<int64_t>(s.size()) != n)
      throw ShapeError("add_noise_emit: source length differs from n_points");
  if (static_cast<int64_t>(target.size()) != n)
    throw ShapeError("add_noise_emit: target length differs from n_points");

  std::vector<double> noisy = target;
  if (spec.noise_std > 0.0) {
    Rng noise = Rng(spec.seed).stream(kNoiseStream);
    for (double& v : noisy) v += noise.normal(spec.noise_std);
  }

  std::ofstream out(path);
  if (!out) throw IoError("add_noise_emit: cannot write " + path);
  out << "# synthetic cross-lag dataset\n";
  out << "# n_points=" << n << " seed=" << spec.seed
      << " noise_std=" << format_double(spec.noise_std) << "\n";
  out << "# patch_len=" << spec.patch_len << " stride=" << spec.stride
      << " blend_period=" << spec.blend_period << "\n";
  for (size_t i = 0; i < spec.sines.size(); ++i)
    out << "# var_" << i + 1 << ": sine amplitude=" << format_double(spec.sines[i].amplitude)
        << " frequency=" << format_double(spec.sines[i].frequency)
        << " phase=" << format_double(spec.sines[i].phase) << "\n";
  for (size_t i = 0; i < spec.walk_stds.size(); ++i)
    out << "# var_" << spec.sines.size() + i + 1
        << ": random walk step_std=" << format_double(spec.walk_stds[i]) << "\n";
  for (const auto& p : spec.pairs)
    out << "# pair: var_" << p.src_a + 1 << " lag=" << p.lag_a << ", var_" << p.src_b + 1
        << " lag=" << p.lag_b << ", weight=" << format_double(p.weight) << "\n";

  const int64_t n_src = spec.sources();
  for (int64_t i = 0; i < n_src; ++i) out << "var_" << i + 1 << ",";
  out << "target\n";
  for (int64_t t = 0; t < n; ++t) {
    for (int64_t i = 0; i < n_src; ++i)
      out << format_double(sources[static_cast<size_t>(i)][static_cast<size_t>(t)]) << ",";
    out << format_double(noisy[static_cast<size_t>(t)]) << "\n";
  }
  if (!out) throw IoError("add_noise_emit: write to " + path + " failed");
}

void generate_synthetic_csv(const SynthSpec& spec, const std::string& path) {
  const auto sources = gen_sources(spec);
  const auto target = build_target(sources, spec);
  add_noise_emit(target, sources, spec, path);
}

}  // namespace crosstime
