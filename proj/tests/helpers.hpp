#pragma once

// Shared test utilities: random tensors and the central finite-difference
// oracle used to check analytic gradients.

#include <cmath>
#include <functional>
#include <vector>

#include "tinydd/rng.hpp"
#include "tinydd/tensor.hpp"

namespace tdt {

inline std::vector<double> random_values(std::int64_t n, tinydd::Rng& rng,
                                         double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline tinydd::Tensor random_tensor(const tinydd::Shape& s, tinydd::Rng& rng,
                                    double lo = -1.0, double hi = 1.0) {
  return tinydd::Tensor(s, random_values(tinydd::numel(s), rng, lo, hi));
}

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1.0});
  return std::abs(got - want) / denom;
}

// Central finite differences of a scalar function against an analytic
// gradient, reporting the worst relative error over all coordinates.
inline double max_grad_rel_err(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, const std::vector<double>& analytic,
    double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double hi = f(x);
    x[i] = keep - h;
    const double lo = f(x);
    x[i] = keep;
    worst = std::max(worst, rel_err(analytic[i], (hi - lo) / (2.0 * h)));
  }
  return worst;
}

}  // namespace tdt
