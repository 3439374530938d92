#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace crosstime {

/// Counter-based SplitMix64 generator.
///
/// Draw i of a stream keyed by `key` is `mix(key + (i+1) * GAMMA)` where
/// `mix` is the SplitMix64 finalizer and GAMMA the 64-bit golden-ratio
/// constant. Outputs depend only on (key, counter), so streams derived via
/// stream() are independent of each other's call history, and every draw is
/// reproducible across platforms. Gaussian variates use Box-Muller on the
/// 53-bit uniform, with the spare value cached.
class Rng {
 public:
  explicit Rng(uint64_t key) : key_(key) {}

  /// Derives an independent stream; the same (key, id) always yields the
  /// same stream.
  Rng stream(uint64_t stream_id) const {
    return Rng(mix(key_ ^ mix(stream_id + kGamma)));
  }

  uint64_t next_u64() { return mix(key_ + (++counter_) * kGamma); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]: keeps log() finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * kPi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double stddev) { return normal() * stddev; }

  /// Uniform index in [0, n). Modulo bias is below 2^-53 for any n that fits
  /// in memory here and keeps draws a pure function of the counter.
  uint64_t index(uint64_t n) { return next_u64() % n; }

 private:
  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.14159265358979323846;

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  uint64_t key_;
  uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Fisher-Yates shuffle driven by an Rng stream.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.index(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace crosstime
