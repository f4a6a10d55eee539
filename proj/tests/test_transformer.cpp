#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"

#include "dfcr/gradcheck.hpp"
#include "dfcr/transformer.hpp"

using namespace dfcr;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.patch_size = 2;
  c.base_dim = 8;
  c.depths = {1, 1, 1, 1};
  c.num_heads = {1, 1, 2, 2};
  c.window_size = 2;
  c.mlp_ratio = 2;
  return c;
}

Tensor permute_batch(const Tensor& t, const std::vector<std::size_t>& order) {
  Tensor out(t.shape());
  const std::size_t per = t.size() / t.dim(0);
  for (std::size_t b = 0; b < order.size(); ++b)
    std::copy(t.data() + order[b] * per, t.data() + (order[b] + 1) * per, out.data() + b * per);
  return out;
}

}  // namespace

TEST_SUITE("transformer") {

TEST_CASE("default backbone pyramid shapes for a 64x64 image") {
  Rng rng(20);
  TransformerBranch branch(BackboneConfig{}, 16, true, rng);
  auto out = branch(ag::constant(rng.uniform_tensor({1, 64, 64, 9}, -1, 1)));
  REQUIRE(out.pyramid.levels.size() == 4);
  CHECK(out.pyramid.levels[0].shape() == Shape{1, 16, 16, 32});
  CHECK(out.pyramid.levels[1].shape() == Shape{1, 8, 8, 64});
  CHECK(out.pyramid.levels[2].shape() == Shape{1, 4, 4, 128});
  CHECK(out.pyramid.levels[3].shape() == Shape{1, 2, 2, 256});
  CHECK(out.fused.shape() == Shape{1, 2, 2, 256});
}

TEST_CASE("batch permutation permutes every output") {
  Rng rng(21);
  TransformerBranch branch(tiny_backbone(), 2, true, rng);
  Tensor x = rng.uniform_tensor({3, 16, 16, 9}, -1, 1);
  ag::NoGradGuard guard;
  auto a = branch(ag::constant(x));
  auto b = branch(ag::constant(permute_batch(x, {2, 0, 1})));
  for (std::size_t l = 0; l < 4; ++l)
    CHECK(testing::max_abs_diff(permute_batch(a.pyramid.levels[l].value(), {2, 0, 1}), b.pyramid.levels[l].value()) < 1e-12);
  CHECK(testing::max_abs_diff(permute_batch(a.fused.value(), {2, 0, 1}), b.fused.value()) < 1e-12);
}

TEST_CASE("tiny branch passes a finite-difference check") {
  Rng rng(22);
  TransformerBranch branch(tiny_backbone(), 2, true, rng);
  auto x = nn::make_param(rng.uniform_tensor({1, 16, 16, 9}, -1, 1));
  nn::ParamList params{{"image", x, "input"}};
  branch.collect(params, "t");
  Tensor probe = rng.uniform_tensor({1, 1, 1, 64}, -1, 1);
  auto loss = [&] { return ag::sum_all(ag::mul(branch(x).fused, ag::constant(probe))); };
  GradcheckOptions opt;
  opt.max_entries = 3;
  auto r = gradcheck("transformer", loss, params, opt);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("non-divisible input names the required multiple") {
  Rng rng(23);
  TransformerBackbone backbone(tiny_backbone(), rng);
  try {
    backbone(ag::constant(Tensor({1, 20, 16, 9})));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("16") != std::string::npos);
  }
}

TEST_CASE("zero pyramid with zero projection biases fuses to zero") {
  Rng rng(24);
  PyramidFuse fuse({4, 8, 16}, 2, true, rng);
  for (auto& p : fuse.projections()) p.bias.mutable_value().fill(0.0);
  PyramidFeatures pyr{{ag::constant(Tensor({2, 8, 8, 4})), ag::constant(Tensor({2, 4, 4, 8})), ag::constant(Tensor({2, 2, 2, 16}))}};
  auto out = fuse(pyr).value();
  CHECK(out.shape() == Shape{2, 2, 2, 16});
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("two-level fusion matches the loop oracle") {
  Rng rng(25);
  PyramidFuse fuse({2, 4}, 1, true, rng);
  nn::ParamList params;
  fuse.collect(params, "p", "t");
  oracle::randomize(params, rng);
  Tensor f0 = rng.uniform_tensor({1, 4, 4, 2}, -1, 1), f1 = rng.uniform_tensor({1, 2, 2, 4}, -1, 1);
  auto out = fuse(PyramidFeatures{{ag::constant(f0), ag::constant(f1)}}).value();

  Tensor r0 = oracle::gcam(f0, fuse.gcams()[0]);
  Tensor proj({1, 2, 2, 4});
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      std::vector<double> pooled(2, 0.0);
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx)
          for (std::size_t c = 0; c < 2; ++c) pooled[c] += 0.25 * oracle::px(r0, 0, 2 * y + dy, 2 * x + dx, c);
      auto v = oracle::dense(pooled, fuse.projections()[0]);
      for (std::size_t c = 0; c < 4; ++c) proj[(y * 2 + x) * 4 + c] = v[c];
    }
  auto w = oracle::gcam_weights(proj, fuse.gcams()[1]);
  Tensor expect = oracle::scale(f1, w);
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += proj[i];
  CHECK(testing::max_rel_error(out, expect) < 1e-12);
}

TEST_CASE("mismatched pyramid is a configuration error") {
  Rng rng(26);
  PyramidFuse fuse({2, 4}, 1, true, rng);
  CHECK_THROWS_AS(fuse(PyramidFeatures{{ag::constant(Tensor({1, 4, 4, 2}))}}), ConfigError);
  CHECK_THROWS_AS(fuse(PyramidFeatures{{ag::constant(Tensor({1, 4, 4, 3})), ag::constant(Tensor({1, 2, 2, 4}))}}), ConfigError);
}

TEST_CASE("identical seeds give bitwise identical outputs") {
  Tensor x = Rng(27).uniform_tensor({2, 16, 16, 9}, -1, 1);
  Rng r1(28), r2(28);
  TransformerBranch a(tiny_backbone(), 2, true, r1), b(tiny_backbone(), 2, true, r2);
  CHECK(a(ag::constant(x)).fused.value().storage() == b(ag::constant(x)).fused.value().storage());
}

TEST_CASE("random inputs in [-3,3] give finite outputs") {
  Rng rng(29);
  TransformerBranch branch(tiny_backbone(), 2, true, rng);
  ag::NoGradGuard guard;
  for (int i = 0; i < 10; ++i) {
    auto out = branch(ag::constant(rng.uniform_tensor({2, 16, 16, 9}, -3, 3)));
    CHECK(out.fused.value().all_finite());
    for (const auto& l : out.pyramid.levels) CHECK(l.value().all_finite());
  }
}

}
