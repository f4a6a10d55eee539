#pragma once

#include <algorithm>
#include <cmath>

#include "dfcr/autograd.hpp"

namespace testing {

inline double max_rel_error(const dfcr::Tensor& a, const dfcr::Tensor& b) {
  double scale = 1e-12, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / scale;
}

inline double max_abs_diff(const dfcr::Tensor& a, const dfcr::Tensor& b) {
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  return diff;
}

inline dfcr::ag::Var leaf(const dfcr::Tensor& t) { return dfcr::ag::Var(t, true); }

inline dfcr::Tensor random(dfcr::Rng& rng, const dfcr::Shape& shape, double lo = -1.0, double hi = 1.0) {
  return rng.uniform_tensor(shape, lo, hi);
}

}  // namespace testing
