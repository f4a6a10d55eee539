#pragma once

// Scalar-loop reference computations for the tests. Nothing here calls the
// library's kernels or autograd ops; parameters are read straight from their
// tensors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dfcr/attention_zoo.hpp"
#include "dfcr/dfwfm.hpp"
#include "dfcr/gcam.hpp"
#include "dfcr/lfem.hpp"
#include "dfcr/metrics.hpp"

namespace oracle {

using dfcr::Tensor;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Overwrites every parameter with N(0, scale^2) draws (biases included).
inline void randomize(const dfcr::nn::ParamList& params, dfcr::Rng& rng, double scale = 0.5) {
  for (const auto& p : params) {
    dfcr::ag::Var v = p.var;
    for (auto& x : v.mutable_value().values()) x = scale * rng.normal();
  }
}

inline std::vector<double> dense(const std::vector<double>& x, const dfcr::nn::Linear& l) {
  const auto& w = l.weight.value();
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<double> y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    double s = l.bias.defined() ? l.bias.value()[o] : 0.0;
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i * out + o];
    y[o] = s;
  }
  return y;
}

inline double px(const Tensor& f, std::size_t b, std::size_t y, std::size_t x, std::size_t c) {
  return f[((b * f.dim(1) + y) * f.dim(2) + x) * f.dim(3) + c];
}

inline std::vector<double> avg_pool(const Tensor& f, std::size_t b) {
  const std::size_t h = f.dim(1), w = f.dim(2), c = f.dim(3);
  std::vector<double> v(c, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) v[k] += px(f, b, y, x, k);
  for (auto& e : v) e /= double(h * w);
  return v;
}

inline std::vector<double> max_pool(const Tensor& f, std::size_t b) {
  const std::size_t h = f.dim(1), w = f.dim(2), c = f.dim(3);
  std::vector<double> v(c, -1e300);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) v[k] = std::max(v[k], px(f, b, y, x, k));
  return v;
}

inline std::vector<double> two_layer(const std::vector<double>& v, const dfcr::nn::Linear& a, const dfcr::nn::Linear& b) {
  auto h = dense(v, a);
  for (auto& e : h) e = std::max(0.0, e);
  return dense(h, b);
}

inline Tensor scale(const Tensor& f, const std::vector<std::vector<double>>& w) {
  Tensor out = f;
  for (std::size_t b = 0; b < f.dim(0); ++b)
    for (std::size_t y = 0; y < f.dim(1); ++y)
      for (std::size_t x = 0; x < f.dim(2); ++x)
        for (std::size_t k = 0; k < f.dim(3); ++k) out[((b * f.dim(1) + y) * f.dim(2) + x) * f.dim(3) + k] *= w[b][k];
  return out;
}

inline std::vector<std::vector<double>> gcam_weights(const Tensor& f, const dfcr::GcamParams& p) {
  std::vector<std::vector<double>> w;
  for (std::size_t b = 0; b < f.dim(0); ++b) {
    auto m = two_layer(max_pool(f, b), p.fc1, p.fc2);
    auto a = two_layer(avg_pool(f, b), p.fc1, p.fc2);
    std::vector<double> g(m.size());
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = sigmoid(m[k] + a[k]);
    w.push_back(g);
  }
  return w;
}

inline Tensor gcam(const Tensor& f, const dfcr::GcamParams& p) { return scale(f, gcam_weights(f, p)); }

inline Tensor se(const Tensor& f, const dfcr::SeParams& p) {
  std::vector<std::vector<double>> w;
  for (std::size_t b = 0; b < f.dim(0); ++b) {
    auto s = two_layer(avg_pool(f, b), p.fc1, p.fc2);
    for (auto& e : s) e = sigmoid(e);
    w.push_back(s);
  }
  return scale(f, w);
}

inline Tensor eca(const Tensor& f, const dfcr::EcaParams& p) {
  const auto& k = p.weight.value();
  const long half = long(k.size() / 2), c = long(f.dim(3));
  std::vector<std::vector<double>> w;
  for (std::size_t b = 0; b < f.dim(0); ++b) {
    auto g = avg_pool(f, b);
    std::vector<double> s(g.size());
    for (long i = 0; i < c; ++i) {
      double acc = 0.0;
      for (long j = 0; j < long(k.size()); ++j) {
        const long src = i + j - half;
        if (src >= 0 && src < c) acc += k[std::size_t(j)] * g[std::size_t(src)];
      }
      s[std::size_t(i)] = sigmoid(acc);
    }
    w.push_back(s);
  }
  return scale(f, w);
}

inline Tensor cbam(const Tensor& f, const dfcr::CbamParams& p) {
  Tensor x = gcam(f, p.channel);
  const std::size_t bn = f.dim(0), h = f.dim(1), w = f.dim(2), c = f.dim(3);
  const auto& kw = p.spatial.weight.value();  // [k,k,2,1]
  const long k = long(kw.dim(0)), pad = long(p.spatial.pad);
  Tensor out = x;
  for (std::size_t b = 0; b < bn; ++b) {
    std::vector<double> mean(h * w, 0.0), mx(h * w, -1e300);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double v = px(x, b, y, xx, ch);
          mean[y * w + xx] += v / double(c);
          mx[y * w + xx] = std::max(mx[y * w + xx], v);
        }
    for (long y = 0; y < long(h); ++y)
      for (long xx = 0; xx < long(w); ++xx) {
        double s = p.spatial.bias.value()[0];
        for (long ky = 0; ky < k; ++ky)
          for (long kx = 0; kx < k; ++kx) {
            const long sy = y + ky - pad, sx = xx + kx - pad;
            if (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(w)) continue;
            const std::size_t at = std::size_t(sy) * w + std::size_t(sx);
            s += kw[std::size_t((ky * k + kx) * 2 + 0)] * mean[at] + kw[std::size_t((ky * k + kx) * 2 + 1)] * mx[at];
          }
        const double g = sigmoid(s);
        for (std::size_t ch = 0; ch < c; ++ch) out[((b * h + std::size_t(y)) * w + std::size_t(xx)) * c + ch] *= g;
      }
  }
  return out;
}

struct LfemOut {
  Tensor output;
  std::vector<std::vector<double>> attention;
};

/// z: [B,d,K].
inline LfemOut lfem(const Tensor& f, const Tensor& z, const dfcr::LfemParams& p) {
  const std::size_t bn = f.dim(0), n = f.dim(1) * f.dim(2), c = f.dim(3), d = z.dim(1), k = z.dim(2);
  LfemOut r{f, {}};
  for (std::size_t b = 0; b < bn; ++b) {
    std::vector<std::vector<double>> zp(k);
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<double> col(d);
      for (std::size_t i = 0; i < d; ++i) col[i] = z[(b * d + i) * k + j];
      zp[j] = dense(col, p.fc_z);
    }
    std::vector<double> contrib(n);
    for (std::size_t pos = 0; pos < n; ++pos) {
      std::vector<double> row(c);
      for (std::size_t ch = 0; ch < c; ++ch) row[ch] = f[(b * n + pos) * c + ch];
      auto fp = dense(row, p.fc_f);
      double t = 0.0;
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t q = 0; q < fp.size(); ++q) t += fp[q] * zp[j][q];
      contrib[pos] = t / double(k);
    }
    const double m = *std::max_element(contrib.begin(), contrib.end());
    double s = 0.0;
    for (auto& v : contrib) s += std::exp(v - m);
    std::vector<double> a(n);
    for (std::size_t pos = 0; pos < n; ++pos) a[pos] = std::exp(contrib[pos] - m) / s;
    for (std::size_t pos = 0; pos < n; ++pos)
      for (std::size_t ch = 0; ch < c; ++ch) r.output[(b * n + pos) * c + ch] *= 1.0 + a[pos];
    r.attention.push_back(a);
  }
  return r;
}

/// 3×3 depthwise (pad 1) then pointwise, one sample, NHWC.
inline Tensor separable(const Tensor& f, const dfcr::SeparableConv& s) {
  const std::size_t bn = f.dim(0), h = f.dim(1), w = f.dim(2), c = f.dim(3);
  const auto& dw = s.depthwise.weight.value();
  Tensor mid(f.shape());
  for (std::size_t b = 0; b < bn; ++b)
    for (long y = 0; y < long(h); ++y)
      for (long x = 0; x < long(w); ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = s.depthwise.bias.value()[ch];
          for (long ky = 0; ky < 3; ++ky)
            for (long kx = 0; kx < 3; ++kx) {
              const long sy = y + ky - 1, sx = x + kx - 1;
              if (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(w)) continue;
              acc += dw[std::size_t(ky * 3 + kx) * c + ch] * px(f, b, std::size_t(sy), std::size_t(sx), ch);
            }
          mid[((b * h + std::size_t(y)) * w + std::size_t(x)) * c + ch] = acc;
        }
  Tensor out(f.shape());
  for (std::size_t pix = 0; pix < bn * h * w; ++pix) {
    std::vector<double> v(mid.data() + pix * c, mid.data() + (pix + 1) * c);
    auto o = dense(v, s.pointwise);
    std::copy(o.begin(), o.end(), out.data() + pix * c);
  }
  return out;
}

inline Tensor dfwfm(const Tensor& ft, const Tensor& fc, const dfcr::DfwfmParams& p) {
  const std::size_t bn = ft.dim(0), h = ft.dim(1), w = ft.dim(2), c = ft.dim(3);
  std::vector<std::vector<double>> wt, wc;
  for (std::size_t b = 0; b < bn; ++b) {
    auto a = avg_pool(ft, b), m = max_pool(fc, b);
    for (auto& e : a) e = sigmoid(e);
    for (auto& e : m) e = sigmoid(e);
    wt.push_back(a);
    wc.push_back(m);
  }
  Tensor gt = scale(ft, wt), gc = scale(fc, wc), f3 = gt;
  for (std::size_t i = 0; i < f3.size(); ++i) f3[i] += gc[i];
  Tensor dt = separable(gt, p.sep_t), dc = separable(gc, p.sep_c), d3 = separable(f3, p.sep_joint);
  Tensor out({bn, h, w, 2 * c});
  for (std::size_t pix = 0; pix < bn * h * w; ++pix) {
    std::vector<double> cat_t(2 * c), cat_c(2 * c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      cat_t[ch] = dt[pix * c + ch];
      cat_c[ch] = dc[pix * c + ch];
      cat_t[c + ch] = cat_c[c + ch] = d3[pix * c + ch];
    }
    auto ot = dense(cat_t, p.mix_t), oc = dense(cat_c, p.mix_c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      out[pix * 2 * c + ch] = std::max(0.0, ot[ch] + gt[pix * c + ch]);
      out[pix * 2 * c + c + ch] = std::max(0.0, oc[ch] + gc[pix * c + ch]);
    }
  }
  return out;
}

/// Solves A s = rhs by Gaussian elimination with partial pivoting, A n×n row-major.
inline std::vector<double> gauss_solve(std::vector<double> a, std::vector<double> rhs, std::size_t n) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    for (std::size_t j = 0; j < n; ++j) std::swap(a[col * n + j], a[piv * n + j]);
    std::swap(rhs[col], rhs[piv]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      for (std::size_t j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
      rhs[r] -= f * rhs[col];
    }
  }
  std::vector<double> s(n);
  for (std::size_t i = n; i-- > 0;) {
    double acc = rhs[i];
    for (std::size_t j = i + 1; j < n; ++j) acc -= a[i * n + j] * s[j];
    s[i] = acc / a[i * n + i];
  }
  return s;
}

/// Ridge coefficients for one sample x[d] against basis B[d,K] (row-major).
inline std::vector<double> ridge(const std::vector<double>& x, const std::vector<double>& basis, std::size_t d,
                                 std::size_t k, double lambda) {
  std::vector<double> a(k * k, 0.0), rhs(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t r = 0; r < d; ++r) a[i * k + j] += basis[r * k + i] * basis[r * k + j];
    a[i * k + i] += lambda;
    for (std::size_t r = 0; r < d; ++r) rhs[i] += basis[r * k + i] * x[r];
  }
  return gauss_solve(a, rhs, k);
}

/// ||x/|x| - y/|y|||^2 written out term by term.
inline double dictionary_distance(const std::vector<double>& x, const std::vector<double>& y) {
  double nx = 0, ny = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  nx = std::sqrt(nx);
  ny = std::sqrt(ny);
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] / nx - y[i] / ny) * (x[i] / nx - y[i] / ny);
  return s;
}

struct Scores {
  double oa, macro_precision, macro_recall, macro_f1, kappa;
  std::vector<double> recall, precision;
};

/// Metric definitions from raw counts, one class at a time. Assumes every
/// class has at least one true sample.
inline Scores scores(const std::vector<std::vector<std::uint64_t>>& cm) {
  const std::size_t k = cm.size();
  double total = 0, diag = 0;
  std::vector<double> row(k, 0), col(k, 0);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t p = 0; p < k; ++p) {
      total += double(cm[t][p]);
      row[t] += double(cm[t][p]);
      col[p] += double(cm[t][p]);
      if (t == p) diag += double(cm[t][p]);
    }
  Scores s{};
  s.recall.resize(k);
  s.precision.resize(k);
  double f1 = 0, chance = 0;
  for (std::size_t c = 0; c < k; ++c) {
    s.recall[c] = double(cm[c][c]) / row[c];
    s.precision[c] = col[c] > 0 ? double(cm[c][c]) / col[c] : 0.0;
    s.macro_recall += s.recall[c] / double(k);
    s.macro_precision += s.precision[c] / double(k);
    const double denom = s.recall[c] + s.precision[c];
    f1 += denom > 0 ? 2 * s.recall[c] * s.precision[c] / denom : 0.0;
    chance += row[c] * col[c];
  }
  s.macro_f1 = f1 / double(k);
  s.oa = diag / total;
  chance /= total * total;
  s.kappa = (s.oa - chance) / (1 - chance);
  return s;
}

}  // namespace oracle
