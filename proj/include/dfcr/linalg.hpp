#pragma once

#include <span>
#include <vector>

namespace dfcr::linalg {

/// Lower-triangular Cholesky factor of a symmetric positive definite n×n
/// row-major matrix. Returns false when a pivot is not safely positive.
bool cholesky(std::span<const double> a, std::size_t n, std::vector<double>& lower);

/// Solves L L^T x = b in place.
void cholesky_solve(const std::vector<double>& lower, std::size_t n, std::span<double> b);

}  // namespace dfcr::linalg
