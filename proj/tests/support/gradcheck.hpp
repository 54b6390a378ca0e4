#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "lgf/autodiff.hpp"

namespace lgf::testing {

// Central finite differences of a scalar function of one tensor's values.
// Independent of the reverse-mode path: only forward evaluations are used.
inline Tensor numeric_gradient(Tensor& point, const std::function<double()>& f, double h = 1e-5) {
  Tensor grad(point.shape());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double up = f();
    point[i] = saved - h;
    const double down = f();
    point[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Norm-wise relative error: max |a - n| over max(|a|, |n|), floored so that
// an all-zero gradient compares on absolute terms.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / std::max(scale, 1e-8);
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace lgf::testing
