#include <cstdio>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"

#include "dfcr/gradcheck.hpp"
#include "dfcr/model.hpp"
#include "dfcr/optim.hpp"

using namespace dfcr;

namespace {

double cross_entropy_oracle(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[i * k + j]);
    total += -std::log(std::exp(logits[i * k + labels[i]]) / z);
  }
  return total / double(b);
}

std::size_t scan_argmax(const double* row, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t j = 0; j < k; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("default model produces finite logits for a 64x64 batch") {
  ModelConfig cfg;
  DfcrNet net(cfg, 0);
  ag::NoGradGuard guard;
  auto out = net.forward(ag::constant(Rng(80).uniform_tensor({2, 64, 64, 9}, -1, 1)));
  CHECK(out.logits.shape() == Shape{2, 4});
  CHECK(out.logits.value().all_finite());
  CHECK(out.dictionary_loss.value()[0] >= 0.0);
  CHECK(out.dictionary_loss.value()[0] <= 4.0);
  CHECK(out.attention_sums.size() == 8);
  for (double s : out.attention_sums) CHECK(std::abs(s - 1.0) < 1e-9);
}

TEST_CASE("logits are batch-permutation equivariant") {
  DfcrNet net(tiny_model_config(), 1);
  Rng rng(81);
  Tensor x = rng.uniform_tensor({3, 16, 16, 9}, -1, 1), rev(x.shape());
  const std::size_t per = x.size() / 3;
  for (std::size_t b = 0; b < 3; ++b) std::copy(x.data() + b * per, x.data() + (b + 1) * per, rev.data() + (2 - b) * per);
  ag::NoGradGuard guard;
  auto a = net.forward(ag::constant(x)).logits.value(), c = net.forward(ag::constant(rev)).logits.value();
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(a[b * 3 + j] - c[(2 - b) * 3 + j]) < 1e-12);
}

TEST_CASE("tiny model gradients match finite differences") {
  auto r = run_module_gradcheck("model");
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("total loss is cross-entropy plus weighted dictionary loss") {
  DfcrNet net(tiny_model_config(), 2);
  Rng rng(82);
  const std::vector<std::size_t> labels{0, 2};
  auto out = net.forward(ag::constant(rng.uniform_tensor({2, 16, 16, 9}, -1, 1)));
  const double ce = cross_entropy_oracle(out.logits.value(), labels);
  CHECK(total_loss(out, labels, 0.0).value()[0] == doctest::Approx(ce).epsilon(1e-12));
  const double lc = out.dictionary_loss.value()[0];
  CHECK(total_loss(out, labels, 0.7).value()[0] == doctest::Approx(ce + 0.7 * lc).epsilon(1e-12));
  CHECK(total_loss(out, labels, 0.7).value()[0] >= 0.0);
  CHECK_THROWS_AS(total_loss(out, {0, 3}, 1.0), InputError);
  CHECK_THROWS_AS(total_loss(out, labels, -1.0), ConfigError);
}

TEST_CASE("perfect reconstruction leaves only cross-entropy") {
  Rng rng(83);
  Tensor x = rng.normal_tensor({3, 4}, 1.0), y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= 2.5;
  ModelOutput out;
  out.logits = ag::constant(rng.normal_tensor({3, 4}, 1.0));
  out.dictionary_loss = dictionary_loss(ag::constant(x), ag::constant(y)).mean;
  CHECK(out.dictionary_loss.value()[0] < 1e-15);
  const std::vector<std::size_t> labels{1, 0, 3};
  CHECK(total_loss(out, labels, 1.0).value()[0] == doctest::Approx(cross_entropy_oracle(out.logits.value(), labels)));
}

TEST_CASE("predict") {
  CHECK(predict(Tensor({1, 4}, std::vector<double>{0, 1, 0, 0})) == std::vector<std::size_t>{1});
  CHECK(predict(Tensor({1, 4}, std::vector<double>{1, 1, 0, 0})) == std::vector<std::size_t>{0});
  Rng rng(84);
  Tensor logits = rng.normal_tensor({50, 5}, 1.0);
  auto got = predict(logits);
  for (std::size_t i = 0; i < 50; ++i) CHECK(got[i] == scan_argmax(logits.data() + i * 5, 5));
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += double(i / 5) * 3.0 - 17.0;
  CHECK(predict(logits) == got);
}

TEST_CASE("one small Adam step lowers the loss on a fixed batch") {
  DfcrNet net(tiny_model_config(), 3);
  Rng rng(85);
  auto x = ag::constant(rng.uniform_tensor({4, 16, 16, 9}, -1, 1));
  const std::vector<std::size_t> labels{0, 1, 2, 1};
  Adam opt(net.parameters(), AdamOptions{1e-4});
  opt.zero_grad();
  auto before = total_loss(net.forward(x), labels, 1.0);
  ag::backward(before);
  opt.step();
  auto after = total_loss(net.forward(x), labels, 1.0);
  CHECK(after.value()[0] < before.value()[0]);
}

TEST_CASE("non-finite input names the failing stage") {
  DfcrNet net(tiny_model_config(), 4);
  Tensor x({1, 16, 16, 9});
  x[5] = std::numeric_limits<double>::quiet_NaN();
  try {
    net.forward(ag::constant(x));
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("transformer") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip restores identical logits") {
  auto cfg = tiny_model_config();
  DfcrNet net(cfg, 5);
  auto ckpt = make_checkpoint(net, 5, 42);
  ckpt.metadata["note"] = "x";
  auto bytes = encode_checkpoint(ckpt);
  CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "DFCR1");
  auto back = decode_checkpoint(bytes);
  CHECK(back.seed == 5);
  CHECK(back.step == 42);
  CHECK(back.metadata["note"] == "x");
  CHECK(back.tensors.size() == ckpt.tensors.size());

  const auto path = (std::filesystem::temp_directory_path() / "dfcr_model_test.dfcr").string();
  save_checkpoint(path, ckpt);
  auto loaded = load_checkpoint(path);
  std::remove(path.c_str());
  ModelConfig restored_cfg;
  from_json(loaded.config, restored_cfg);
  DfcrNet other(restored_cfg, 99);
  restore_parameters(loaded, other);
  Tensor x = Rng(86).uniform_tensor({2, 16, 16, 9}, -1, 1);
  ag::NoGradGuard guard;
  CHECK(net.forward(ag::constant(x)).logits.value().storage() == other.forward(ag::constant(x)).logits.value().storage());

  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes), InputError);
  auto short_bytes = encode_checkpoint(ckpt);
  short_bytes.resize(short_bytes.size() - 8);
  CHECK_THROWS_AS(decode_checkpoint(short_bytes), InputError);
}

TEST_CASE("toggled-off modules drop their parameters") {
  auto cfg = tiny_model_config();
  DfcrNet full(cfg, 0);
  cfg.toggles = {false, false, false};
  DfcrNet base(cfg, 0);
  CHECK(base.parameter_count() < full.parameter_count());
  CHECK_FALSE(base.cdlm().has_value());
  auto out = base.forward(ag::constant(Tensor({1, 16, 16, 9}, 0.1)));
  CHECK_FALSE(out.dictionary_loss.defined());
  CHECK(out.attention_sums.empty());
}

TEST_CASE("config JSON round trip") {
  auto cfg = tiny_model_config();
  cfg.attention = AttentionVariant::Eca;
  cfg.toggles.dfwfm = false;
  nlohmann::json j;
  to_json(j, cfg);
  ModelConfig back;
  from_json(j, back);
  nlohmann::json j2;
  to_json(j2, back);
  CHECK(j == j2);
}

}
