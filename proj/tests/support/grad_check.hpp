#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "crosstime/tensor.hpp"

namespace crosstime::testing {

/// Compares tape gradients of a scalar forward() against central finite
/// differences over every element of the watched tensors. forward() must be a
/// pure function of the watched values (any rng re-seeded inside). Relative
/// error uses an absolute floor so near-zero gradients do not explode it.
template <typename Fwd>
double max_relative_grad_error(std::vector<Tensor> watched, Fwd forward,
                               double h = 1e-5, double floor = 1e-6) {
  std::vector<std::vector<double>> analytic;
  {
    for (auto& t : watched) t.zero_grad();
    Tape tape;
    Tensor loss = forward();
    tape.backward(loss);
    for (auto& t : watched) {
      std::vector<double> g = t.impl()->grad;
      g.resize(static_cast<size_t>(t.numel()), 0.0);
      analytic.push_back(std::move(g));
    }
  }
  double worst = 0.0;
  for (size_t ti = 0; ti < watched.size(); ++ti) {
    Tensor& t = watched[ti];
    for (int64_t j = 0; j < t.numel(); ++j) {
      const double orig = t.data()[j];
      t.data()[j] = orig + h;
      const double up = forward().item();
      t.data()[j] = orig - h;
      const double dn = forward().item();
      t.data()[j] = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double a = analytic[ti][static_cast<size_t>(j)];
      const double denom = std::max({std::abs(a), std::abs(fd), floor});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                             bool requires_grad = false) {
  const int64_t n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from_vector(std::move(shape), std::move(v), requires_grad);
}

}  // namespace crosstime::testing
