#include "dfcr/cdlm.hpp"

#include <cmath>

#include "dfcr/kernels.hpp"
#include "dfcr/linalg.hpp"

namespace dfcr {

Dictionary make_dictionary(std::size_t feature_dim, std::size_t atoms, Rng& rng) {
  if (feature_dim == 0 || atoms == 0) throw ConfigError("dictionary dimensions must be positive");
  Tensor d({feature_dim, atoms});
  for (std::size_t k = 0; k < atoms; ++k) {
    double norm = 0.0;
    while (!(norm > 1e-12)) {
      norm = 0.0;
      for (std::size_t i = 0; i < feature_dim; ++i) {
        const double v = rng.normal();
        d[i * atoms + k] = v;
        norm += v * v;
      }
      norm = std::sqrt(norm);
    }
    for (std::size_t i = 0; i < feature_dim; ++i) d[i * atoms + k] /= norm;
  }
  return Dictionary{nn::make_param(std::move(d))};
}

CollabTransform make_transform(std::size_t feature_dim, double lambda, Rng& rng, double noise) {
  Tensor w = rng.normal_tensor({feature_dim, feature_dim}, noise);
  for (std::size_t i = 0; i < feature_dim; ++i) w[i * feature_dim + i] += 1.0;
  return CollabTransform{nn::make_param(std::move(w)), lambda};
}

ag::Var collab_basis(const Dictionary& dict, const CollabTransform& t) {
  if (t.weight.rank() != 2 || t.weight.dim(1) != dict.feature_dim()) {
    throw ConfigError("transform " + shape_str(t.weight.shape()) + " does not fit dictionary " +
                      shape_str(dict.atoms.shape()));
  }
  return ag::matmul(t.weight, dict.atoms);
}

ag::Var solve_coefficients(const ag::Var& x, const ag::Var& basis, double lambda) {
  if (basis.rank() != 2 || x.rank() != 2 || x.dim(1) != basis.dim(0)) {
    throw ConfigError("coefficient solve: x " + shape_str(x.shape()) + " vs basis " + shape_str(basis.shape()));
  }
  const std::size_t n = x.dim(0);
  const std::size_t d = basis.dim(0);
  const std::size_t k = basis.dim(1);
  const double* bv = basis.value().data();

  // Gram = B^T B + lambda I
  std::vector<double> gram(k * k, 0.0);
  kernels::gemm(true, false, k, k, d, bv, bv, gram.data(), false);
  for (std::size_t i = 0; i < k; ++i) gram[i * k + i] += lambda;
  std::vector<double> lower;
  if (!linalg::cholesky(gram, k, lower)) {
    throw NumericError("coefficient solve: (WD)^T(WD) + lambda*I is singular or indefinite (lambda = " +
                       std::to_string(lambda) + "); the transformed dictionary is rank deficient, use lambda > 0");
  }

  // rhs rows = x B, solved per row.
  Tensor s({n, k});
  kernels::gemm(false, false, n, k, d, x.value().data(), bv, s.data(), false);
  for (std::size_t r = 0; r < n; ++r) linalg::cholesky_solve(lower, k, {s.data() + r * k, k});
  if (!s.all_finite()) throw NumericError("coefficient solve produced non-finite values");

  auto nx = x.node();
  auto nb = basis.node();
  return ag::make_result(std::move(s), {x, basis},
                     [nx, nb, lower = std::move(lower), n, d, k](const Tensor& g, const Tensor& sv) {
                       // u = A^{-1} g per row; dx = B u; dB = x u^T - B s u^T - B u s^T.
                       Tensor u = g;
                       for (std::size_t r = 0; r < n; ++r) linalg::cholesky_solve(lower, k, {u.data() + r * k, k});
                       const double* b = nb->value.data();
                       if (nx->requires_grad) {
                         kernels::gemm(false, true, n, d, k, u.data(), b, nx->grad_buffer().data(), true);
                       }
                       if (nb->requires_grad) {
                         double* gb = nb->grad_buffer().data();
                         std::vector<double> bs(n * d), bu(n * d);
                         kernels::gemm(false, true, n, d, k, sv.data(), b, bs.data(), false);
                         kernels::gemm(false, true, n, d, k, u.data(), b, bu.data(), false);
                         const double* xv = nx->value.data();
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t i = 0; i < d; ++i) {
                             const double xr = xv[r * d + i] - bs[r * d + i];
                             const double bur = bu[r * d + i];
                             for (std::size_t j = 0; j < k; ++j) {
                               gb[i * k + j] += xr * u[r * k + j] - bur * sv[r * k + j];
                             }
                           }
                         }
                       }
                     });
}

ag::Var solve_coefficients(const ag::Var& x, const Dictionary& dict, const CollabTransform& t) {
  return solve_coefficients(x, collab_basis(dict, t), t.lambda);
}

ag::Var reconstruct(const ag::Var& s, const ag::Var& basis) {
  if (s.rank() != 2 || s.dim(1) != basis.dim(1)) {
    throw ConfigError("reconstruct: coefficients " + shape_str(s.shape()) + " vs basis " +
                      shape_str(basis.shape()));
  }
  return ag::matmul(s, ag::transpose2d(basis));
}

ag::Var key_semantic_set(const ag::Var& s, const ag::Var& basis) {
  if (s.rank() != 2 || s.dim(1) != basis.dim(1)) {
    throw ConfigError("key semantic set: coefficients " + shape_str(s.shape()) + " vs basis " +
                      shape_str(basis.shape()));
  }
  const std::size_t n = s.dim(0), d = basis.dim(0), k = basis.dim(1);
  return ag::mul(ag::reshape(s, {n, 1, k}), ag::reshape(basis, {1, d, k}));
}

DictionaryLossResult dictionary_loss(const ag::Var& x, const ag::Var& y, bool stop_gradient) {
  if (x.shape() != y.shape() || x.rank() != 2) {
    throw ShapeError("dictionary loss: x " + shape_str(x.shape()) + " vs y " + shape_str(y.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  const ag::Var xin = stop_gradient ? ag::detach(x) : x;
  Tensor loss({n});
  std::vector<double> xnorm(n), ynorm(n);
  std::size_t skipped = 0;
  const double* xv = x.value().data();
  const double* yv = y.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    double nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      nx += xv[r * d + i] * xv[r * d + i];
      ny += yv[r * d + i] * yv[r * d + i];
    }
    xnorm[r] = std::sqrt(nx);
    ynorm[r] = std::sqrt(ny);
    if (!(xnorm[r] > 0.0) || !(ynorm[r] > 0.0)) {
      ++skipped;
      xnorm[r] = ynorm[r] = 0.0;
      continue;
    }
    double l = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = xv[r * d + i] / xnorm[r] - yv[r * d + i] / ynorm[r];
      l += diff * diff;
    }
    loss[r] = l;
  }
  auto nxn = xin.node();
  auto nyn = y.node();
  DictionaryLossResult res;
  res.skipped = skipped;
  res.per_sample = ag::make_result(std::move(loss), {xin, y},
                               [nxn, nyn, xnorm, ynorm, n, d](const Tensor& g, const Tensor&) {
                                 const double* xv2 = nxn->value.data();
                                 const double* yv2 = nyn->value.data();
                                 double* gx = nxn->requires_grad ? nxn->grad_buffer().data() : nullptr;
                                 double* gy = nyn->requires_grad ? nyn->grad_buffer().data() : nullptr;
                                 for (std::size_t r = 0; r < n; ++r) {
                                   if (xnorm[r] == 0.0) continue;
                                   double uv = 0.0;
                                   for (std::size_t i = 0; i < d; ++i) {
                                     uv += xv2[r * d + i] * yv2[r * d + i];
                                   }
                                   uv /= xnorm[r] * ynorm[r];
                                   for (std::size_t i = 0; i < d; ++i) {
                                     const double u = xv2[r * d + i] / xnorm[r];
                                     const double v = yv2[r * d + i] / ynorm[r];
                                     // d/dy = (2/|y|)(v (u.v) - u), symmetric for x.
                                     if (gy) gy[r * d + i] += g[r] * 2.0 / ynorm[r] * (v * uv - u);
                                     if (gx) gx[r * d + i] += g[r] * 2.0 / xnorm[r] * (u * uv - v);
                                   }
                                 }
                               });
  res.mean = ag::mean_all(res.per_sample);
  return res;
}

Cdlm::Cdlm(std::size_t in_channels, std::size_t feature_dim, std::size_t atoms, double lambda, Rng& rng)
    : input_proj_(in_channels, feature_dim, rng),
      dict_(make_dictionary(feature_dim, atoms, rng)),
      transform_(make_transform(feature_dim, lambda, rng)) {
  if (!(lambda >= 0.0)) throw ConfigError("CDLM lambda must be non-negative");
}

Cdlm::Output Cdlm::operator()(const ag::Var& fused, bool stop_gradient) const {
  Output out;
  out.x = input_proj_(ag::global_avg_pool(fused));
  out.basis = collab_basis(dict_, transform_);
  out.coefficients = solve_coefficients(out.x, out.basis, transform_.lambda);
  out.reconstruction = reconstruct(out.coefficients, out.basis);
  out.key_set = key_semantic_set(out.coefficients, out.basis);
  out.loss = dictionary_loss(out.x, out.reconstruction, stop_gradient);
  return out;
}

void Cdlm::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  input_proj_.collect(out, prefix + ".input_proj", group);
  out.push_back({prefix + ".dictionary", dict_.atoms, group});
  out.push_back({prefix + ".transform", transform_.weight, group});
}

}  // namespace dfcr
