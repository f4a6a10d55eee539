// Parallel kernels against the serial reference loops.
//
//   ./kernel_bench --benchmark_filter=conv
// Set OMP_NUM_THREADS to compare thread counts.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "dfcr/kernels.hpp"

namespace k = dfcr::kernels;

namespace {

std::vector<double> filled(std::size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

// Shapes taken from the desk-scale model.
k::ConvGeometry conv_geometry(const benchmark::State& st) {
  k::ConvGeometry g;
  g.batch = 16;
  g.height = g.width = static_cast<std::size_t>(st.range(0));
  g.in_channels = g.out_channels = static_cast<std::size_t>(st.range(1));
  g.kernel_h = g.kernel_w = 3;
  g.pad = 1;
  return g;
}

template <bool Parallel>
void BM_gemm(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    else
      k::reference::gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<int64_t>(2 * n * n * n));
}

template <bool Parallel>
void BM_conv(benchmark::State& st) {
  const auto g = conv_geometry(st);
  auto x = filled(g.batch * g.height * g.width * g.in_channels, 3);
  auto w = filled(9 * g.in_channels * g.out_channels, 4), bias = filled(g.out_channels, 5);
  std::vector<double> y(g.out_pixels() * g.out_channels);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    else
      k::reference::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_conv_backward(benchmark::State& st) {
  const auto g = conv_geometry(st);
  auto x = filled(g.batch * g.height * g.width * g.in_channels, 3);
  auto w = filled(9 * g.in_channels * g.out_channels, 4);
  auto dy = filled(g.out_pixels() * g.out_channels, 6);
  std::vector<double> dx(x.size()), dw(w.size()), db(g.out_channels);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    else
      k::reference::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void BM_depthwise(benchmark::State& st) {
  const auto g = conv_geometry(st);
  auto x = filled(g.batch * g.height * g.width * g.in_channels, 7);
  auto w = filled(9 * g.in_channels, 8), bias = filled(g.in_channels, 9);
  std::vector<double> y(g.out_pixels() * g.in_channels);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::depthwise_forward(g, x.data(), w.data(), bias.data(), y.data());
    else
      k::reference::depthwise_forward(g, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_conv<true>)->Name("conv/parallel")->Args({16, 32})->Args({8, 64});
BENCHMARK(BM_conv<false>)->Name("conv/reference")->Args({16, 32})->Args({8, 64});
BENCHMARK(BM_conv_backward<true>)->Name("conv_backward/parallel")->Args({16, 32});
BENCHMARK(BM_conv_backward<false>)->Name("conv_backward/reference")->Args({16, 32});
BENCHMARK(BM_depthwise<true>)->Name("depthwise/parallel")->Args({16, 32})->Args({8, 64});
BENCHMARK(BM_depthwise<false>)->Name("depthwise/reference")->Args({16, 32})->Args({8, 64});

BENCHMARK_MAIN();
