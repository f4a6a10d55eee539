#pragma once

// Dense compute kernels on raw row-major buffers.
//
// The functions in dfcr::kernels are OpenMP-parallel. Every output element is
// owned by exactly one thread and reduced in a fixed order, so results are
// bitwise identical for any thread count. dfcr::kernels::reference holds the
// plain serial loops the parallel versions are tested and benchmarked against.

#include <cstddef>

namespace dfcr::kernels {

/// Geometry of an NHWC 2-D convolution with square stride and symmetric padding.
struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_height() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  std::size_t patch_size() const { return kernel_h * kernel_w * in_channels; }
  std::size_t out_pixels() const { return batch * out_height() * out_width(); }
};

/// Number of threads the parallel kernels will use.
int max_threads();
void set_threads(int n);

/// C[M,N] (+)= op(A) op(B); op transposes when the flag is set.
/// A is M×K (or K×M when trans_a), B is K×N (or N×K when trans_b).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

/// `count` independent gemms laid out contiguously.
void gemm_batched(std::size_t count, bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                  std::size_t k, const double* a, const double* b, double* c, bool accumulate);

/// Unfolds input patches: cols is [out_pixels, kh*kw*Cin], zero outside the image.
void im2col(const ConvGeometry& g, const double* x, double* cols);
/// Folds columns back, accumulating into dx.
void col2im(const ConvGeometry& g, const double* cols, double* dx);

/// y[B,OH,OW,Cout] = conv(x[B,H,W,Cin], w[kh,kw,Cin,Cout]) + bias.
void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y);
/// Accumulates into whichever of dx, dw, db are non-null.
void conv2d_backward(const ConvGeometry& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db);

/// Depthwise: in_channels == out_channels, w is [kh,kw,C].
void depthwise_forward(const ConvGeometry& g, const double* x, const double* w,
                       const double* bias, double* y);
void depthwise_backward(const ConvGeometry& g, const double* x, const double* w,
                        const double* dy, double* dx, double* dw, double* db);

namespace reference {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);
void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y);
void conv2d_backward(const ConvGeometry& g, const double* x, const double* w, const double* dy,
                     double* dx, double* dw, double* db);
void depthwise_forward(const ConvGeometry& g, const double* x, const double* w,
                       const double* bias, double* y);
void depthwise_backward(const ConvGeometry& g, const double* x, const double* w,
                        const double* dy, double* dx, double* dw, double* db);

}  // namespace reference

}  // namespace dfcr::kernels
