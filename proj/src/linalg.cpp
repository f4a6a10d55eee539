#include "dfcr/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dfcr::linalg {

bool cholesky(std::span<const double> a, std::size_t n, std::vector<double>& lower) {
  lower.assign(n * n, 0.0);
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a[i * n + i]));
  const double floor = std::max(scale, 1.0) * 64.0 * std::numeric_limits<double>::epsilon();
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= lower[j * n + k] * lower[j * n + k];
    if (!(d > floor)) return false;
    const double ljj = std::sqrt(d);
    lower[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= lower[i * n + k] * lower[j * n + k];
      lower[i * n + j] = s / ljj;
    }
  }
  return true;
}

void cholesky_solve(const std::vector<double>& lower, std::size_t n, std::span<double> b) {
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= lower[i * n + k] * b[k];
    b[i] = s / lower[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= lower[k * n + i] * b[k];
    b[i] = s / lower[i * n + i];
  }
}

}  // namespace dfcr::linalg
