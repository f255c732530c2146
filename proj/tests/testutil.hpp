#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "crna/rng.hpp"
#include "crna/tensor.hpp"

namespace crna::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Central finite differences of a scalar-valued function with respect to one
// tensor argument. Independent oracle for analytic gradients.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f,
                                const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double orig = xp[i];
    xp[i] = orig + h;
    double fp = f(xp);
    xp[i] = orig - h;
    double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Relative error with an absolute floor so near-zero gradients do not blow
// up the ratio.
inline double max_rel_error(const Tensor& analytic, const Tensor& fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    double denom = std::max({std::fabs(analytic[i]), std::fabs(fd[i]), 1.0});
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

}  // namespace crna::test
