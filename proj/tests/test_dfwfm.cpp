#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"

#include "dfcr/dfwfm.hpp"
#include "dfcr/gradcheck.hpp"

using namespace dfcr;

namespace {

DfwfmParams random_params(std::size_t c, Rng& rng) {
  DfwfmParams p(c, rng);
  nn::ParamList params;
  p.collect(params, "d", "t");
  oracle::randomize(params, rng);
  return p;
}

DfwfmParams zero_params(std::size_t c, Rng& rng) {
  DfwfmParams p(c, rng);
  nn::ParamList params;
  p.collect(params, "d", "t");
  nn::zero_all(params);
  return p;
}

}  // namespace

TEST_SUITE("dfwfm") {

TEST_CASE("output has twice the channels") {
  Rng rng(60);
  auto p = random_params(5, rng);
  auto r = dfwfm_forward(ag::constant(rng.uniform_tensor({2, 3, 4, 5}, -1, 1)), ag::constant(rng.uniform_tensor({2, 3, 4, 5}, -1, 1)), p);
  CHECK(r.output.shape() == Shape{2, 3, 4, 10});
}

TEST_CASE("zero inputs with zero-bias convolutions give zero") {
  Rng rng(61);
  auto p = random_params(3, rng);
  nn::ParamList params;
  p.collect(params, "d", "t");
  for (auto& q : params)
    if (q.name.size() > 5 && q.name.substr(q.name.size() - 5) == ".bias") q.var.mutable_value().fill(0.0);
  auto r = dfwfm_forward(ag::constant(Tensor({1, 3, 3, 3})), ag::constant(Tensor({1, 3, 3, 3})), p);
  for (double v : r.output.value().values()) CHECK(v == 0.0);
}

TEST_CASE("random instance matches the loop oracle") {
  Rng rng(62);
  auto p = random_params(2, rng);
  Tensor ft = rng.uniform_tensor({1, 3, 3, 2}, -1, 1), fc = rng.uniform_tensor({1, 3, 3, 2}, -1, 1);
  auto out = dfwfm_forward(ag::constant(ft), ag::constant(fc), p).output.value();
  CHECK(testing::max_rel_error(out, oracle::dfwfm(ft, fc, p)) < 1e-12);
}

TEST_CASE("branch weights lie strictly inside (0,1)") {
  Rng rng(63);
  auto p = random_params(4, rng);
  auto r = dfwfm_forward(ag::constant(rng.uniform_tensor({2, 3, 3, 4}, -5, 5)), ag::constant(rng.uniform_tensor({2, 3, 3, 4}, -5, 5)), p);
  for (const auto* w : {&r.weight_t, &r.weight_c})
    for (double v : w->value().values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
}

TEST_CASE("with zero convolutions the output is the rectified weighted inputs") {
  Rng rng(64);
  auto p = zero_params(3, rng);
  for (double lo : {0.1, -1.0}) {
    Tensor ft = rng.uniform_tensor({2, 2, 3, 3}, lo, 1), fc = rng.uniform_tensor({2, 2, 3, 3}, lo, 1);
    auto out = dfwfm_forward(ag::constant(ft), ag::constant(fc), p).output.value();
    for (std::size_t b = 0; b < 2; ++b) {
      auto wt = oracle::avg_pool(ft, b), wc = oracle::max_pool(fc, b);
      for (std::size_t pix = 0; pix < 6; ++pix)
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t in = (b * 6 + pix) * 3 + c, o = (b * 6 + pix) * 6 + c;
          const double t = ft[in] * oracle::sigmoid(wt[c]), k = fc[in] * oracle::sigmoid(wc[c]);
          CHECK(out[o] == doctest::Approx(std::max(0.0, t)).epsilon(1e-15));
          CHECK(out[o + 3] == doctest::Approx(std::max(0.0, k)).epsilon(1e-15));
        }
    }
  }
}

TEST_CASE("branch shape mismatch is a configuration error") {
  Rng rng(65);
  auto p = random_params(3, rng);
  CHECK_THROWS_AS(dfwfm_forward(ag::constant(Tensor({1, 3, 3, 3})), ag::constant(Tensor({1, 2, 3, 3})), p), ConfigError);
  CHECK_THROWS_AS(dfwfm_forward(ag::constant(Tensor({1, 3, 3, 4})), ag::constant(Tensor({1, 3, 3, 4})), p), ConfigError);
}

TEST_CASE("gradients match finite differences") {
  auto r = run_module_gradcheck("dfwfm");
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

}
