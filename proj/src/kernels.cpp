#include "dfcr/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dfcr::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 15;

std::vector<double> transpose(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

// C[M,N] += A[M,K] B[K,N] with i-k-j ordering; row i is owned by one thread.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (long i = 0; i < rows; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;
  std::vector<double> at;
  std::vector<double> bt;
  if (trans_a) {
    at = transpose(a, k, m);
    a = at.data();
  }
  if (trans_b) {
    bt = transpose(b, n, k);
    b = bt.data();
  }
  gemm_nn(m, n, k, a, b, c);
}

void gemm_batched(std::size_t count, bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                  std::size_t k, const double* a, const double* b, double* c, bool accumulate) {
  const long total = static_cast<long>(count);
#pragma omp parallel for schedule(static) if (count * m * n * k > kParallelWork)
  for (long g = 0; g < total; ++g) {
    const auto gi = static_cast<std::size_t>(g);
    double* cg = c + gi * m * n;
    if (!accumulate) std::fill(cg, cg + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[gi * m * k + p * m + i] : a[gi * m * k + i * k + p];
        if (av == 0.0) continue;
        double* crow = cg + i * n;
        if (trans_b) {
          const double* bg = b + gi * n * k;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * bg[j * k + p];
        } else {
          const double* brow = b + gi * k * n + p * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t cin = g.in_channels;
  const std::size_t patch = g.patch_size();
  const long rows = static_cast<long>(g.batch * oh);
#pragma omp parallel for schedule(static) if (g.out_pixels() * patch > kParallelWork)
  for (long r = 0; r < rows; ++r) {
    const std::size_t b = static_cast<std::size_t>(r) / oh;
    const std::size_t oy = static_cast<std::size_t>(r) % oh;
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* dst = cols + ((b * oh + oy) * ow + ox) * patch;
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          double* d = dst + (ky * g.kernel_w + kx) * cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
              ix >= static_cast<long>(g.width)) {
            std::fill(d, d + cin, 0.0);
          } else {
            const double* s = x + ((b * g.height + static_cast<std::size_t>(iy)) * g.width +
                                   static_cast<std::size_t>(ix)) * cin;
            std::memcpy(d, s, cin * sizeof(double));
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t cin = g.in_channels;
  const std::size_t patch = g.patch_size();
  const long batches = static_cast<long>(g.batch);
  // Patches overlap within an image, so only the batch axis is split.
#pragma omp parallel for schedule(static) if (g.out_pixels() * patch > kParallelWork)
  for (long bl = 0; bl < batches; ++bl) {
    const auto b = static_cast<std::size_t>(bl);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double* src = cols + ((b * oh + oy) * ow + ox) * patch;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            double* d = dx + ((b * g.height + static_cast<std::size_t>(iy)) * g.width +
                              static_cast<std::size_t>(ix)) * cin;
            const double* s = src + (ky * g.kernel_w + kx) * cin;
            for (std::size_t c = 0; c < cin; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
}

namespace {

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const std::size_t pixels = g.out_pixels();
  const std::size_t cout = g.out_channels;
  if (bias) {
    for (std::size_t p = 0; p < pixels; ++p) std::memcpy(y + p * cout, bias, cout * sizeof(double));
  } else {
    std::fill(y, y + pixels * cout, 0.0);
  }
  if (is_pointwise(g)) {
    gemm(false, false, pixels, cout, g.in_channels, x, w, y, true);
    return;
  }
  std::vector<double> cols(pixels * g.patch_size());
  im2col(g, x, cols.data());
  gemm(false, false, pixels, cout, g.patch_size(), cols.data(), w, y, true);
}

void conv2d_backward(const ConvGeometry& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db) {
  const std::size_t pixels = g.out_pixels();
  const std::size_t cout = g.out_channels;
  const std::size_t patch = g.patch_size();
  if (db) {
    for (std::size_t p = 0; p < pixels; ++p) {
      const double* row = dy + p * cout;
      for (std::size_t c = 0; c < cout; ++c) db[c] += row[c];
    }
  }
  if (is_pointwise(g)) {
    if (dw) gemm(true, false, patch, cout, pixels, x, dy, dw, true);
    if (dx) gemm(false, true, pixels, patch, cout, dy, w, dx, true);
    return;
  }
  if (dw) {
    std::vector<double> cols(pixels * patch);
    im2col(g, x, cols.data());
    gemm(true, false, patch, cout, pixels, cols.data(), dy, dw, true);
  }
  if (dx) {
    std::vector<double> dcols(pixels * patch);
    gemm(false, true, pixels, patch, cout, dy, w, dcols.data(), false);
    col2im(g, dcols.data(), dx);
  }
}

void depthwise_forward(const ConvGeometry& g, const double* x, const double* w,
                       const double* bias, double* y) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t ch = g.in_channels;
  const long rows = static_cast<long>(g.batch * oh);
#pragma omp parallel for schedule(static) if (g.out_pixels() * ch * g.kernel_h * g.kernel_w > kParallelWork)
  for (long r = 0; r < rows; ++r) {
    const std::size_t b = static_cast<std::size_t>(r) / oh;
    const std::size_t oy = static_cast<std::size_t>(r) % oh;
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* out = y + ((b * oh + oy) * ow + ox) * ch;
      for (std::size_t c = 0; c < ch; ++c) out[c] = bias ? bias[c] : 0.0;
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
          const double* in = x + ((b * g.height + static_cast<std::size_t>(iy)) * g.width +
                                  static_cast<std::size_t>(ix)) * ch;
          const double* wk = w + (ky * g.kernel_w + kx) * ch;
          for (std::size_t c = 0; c < ch; ++c) out[c] += in[c] * wk[c];
        }
      }
    }
  }
}

void depthwise_backward(const ConvGeometry& g, const double* x, const double* w,
                        const double* dy, double* dx, double* dw, double* db) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t ch = g.in_channels;
  const std::size_t taps = g.kernel_h * g.kernel_w;
  const bool big = g.out_pixels() * ch * taps > kParallelWork;
  if (db) {
    for (std::size_t p = 0; p < g.out_pixels(); ++p) {
      for (std::size_t c = 0; c < ch; ++c) db[c] += dy[p * ch + c];
    }
  }
  if (dw) {
    // One kernel tap per task; each tap's slice of dw is private to it.
    const long ntaps = static_cast<long>(taps);
#pragma omp parallel for schedule(static) if (big)
    for (long t = 0; t < ntaps; ++t) {
      const std::size_t ky = static_cast<std::size_t>(t) / g.kernel_w;
      const std::size_t kx = static_cast<std::size_t>(t) % g.kernel_w;
      double* wk = dw + static_cast<std::size_t>(t) * ch;
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            const double* in = x + ((b * g.height + static_cast<std::size_t>(iy)) * g.width +
                                    static_cast<std::size_t>(ix)) * ch;
            const double* go = dy + ((b * oh + oy) * ow + ox) * ch;
            for (std::size_t c = 0; c < ch; ++c) wk[c] += in[c] * go[c];
          }
        }
      }
    }
  }
  if (dx) {
    const long batches = static_cast<long>(g.batch);
#pragma omp parallel for schedule(static) if (big)
    for (long bl = 0; bl < batches; ++bl) {
      const auto b = static_cast<std::size_t>(bl);
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double* go = dy + ((b * oh + oy) * ow + ox) * ch;
          for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              double* gi = dx + ((b * g.height + static_cast<std::size_t>(iy)) * g.width +
                                 static_cast<std::size_t>(ix)) * ch;
              const double* wk = w + (ky * g.kernel_w + kx) * ch;
              for (std::size_t c = 0; c < ch; ++c) gi[c] += go[c] * wk[c];
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Serial reference loops.

namespace reference {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

namespace {

template <typename F>
void for_each_tap(const ConvGeometry& g, F&& f) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                ix >= static_cast<long>(g.width)) {
              continue;
            }
            const std::size_t in_pix =
                (b * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix);
            const std::size_t out_pix = (b * oh + oy) * ow + ox;
            f(in_pix, out_pix, ky, kx);
          }
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const std::size_t cin = g.in_channels;
  const std::size_t cout = g.out_channels;
  for (std::size_t p = 0; p < g.out_pixels(); ++p) {
    for (std::size_t o = 0; o < cout; ++o) y[p * cout + o] = bias ? bias[o] : 0.0;
  }
  for_each_tap(g, [&](std::size_t ip, std::size_t op, std::size_t ky, std::size_t kx) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t o = 0; o < cout; ++o) {
        y[op * cout + o] += x[ip * cin + ci] * w[((ky * g.kernel_w + kx) * cin + ci) * cout + o];
      }
    }
  });
}

void conv2d_backward(const ConvGeometry& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db) {
  const std::size_t cin = g.in_channels;
  const std::size_t cout = g.out_channels;
  if (db) {
    for (std::size_t p = 0; p < g.out_pixels(); ++p) {
      for (std::size_t o = 0; o < cout; ++o) db[o] += dy[p * cout + o];
    }
  }
  for_each_tap(g, [&](std::size_t ip, std::size_t op, std::size_t ky, std::size_t kx) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t o = 0; o < cout; ++o) {
        const std::size_t wi = ((ky * g.kernel_w + kx) * cin + ci) * cout + o;
        if (dx) dx[ip * cin + ci] += dy[op * cout + o] * w[wi];
        if (dw) dw[wi] += dy[op * cout + o] * x[ip * cin + ci];
      }
    }
  });
}

void depthwise_forward(const ConvGeometry& g, const double* x, const double* w,
                       const double* bias, double* y) {
  const std::size_t ch = g.in_channels;
  for (std::size_t p = 0; p < g.out_pixels(); ++p) {
    for (std::size_t c = 0; c < ch; ++c) y[p * ch + c] = bias ? bias[c] : 0.0;
  }
  for_each_tap(g, [&](std::size_t ip, std::size_t op, std::size_t ky, std::size_t kx) {
    for (std::size_t c = 0; c < ch; ++c) {
      y[op * ch + c] += x[ip * ch + c] * w[(ky * g.kernel_w + kx) * ch + c];
    }
  });
}

void depthwise_backward(const ConvGeometry& g, const double* x, const double* w,
                        const double* dy, double* dx, double* dw, double* db) {
  const std::size_t ch = g.in_channels;
  if (db) {
    for (std::size_t p = 0; p < g.out_pixels(); ++p) {
      for (std::size_t c = 0; c < ch; ++c) db[c] += dy[p * ch + c];
    }
  }
  for_each_tap(g, [&](std::size_t ip, std::size_t op, std::size_t ky, std::size_t kx) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t wi = (ky * g.kernel_w + kx) * ch + c;
      if (dx) dx[ip * ch + c] += dy[op * ch + c] * w[wi];
      if (dw) dw[wi] += dy[op * ch + c] * x[ip * ch + c];
    }
  });
}

}  // namespace reference

}  // namespace dfcr::kernels
