#include "dfcr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfcr/cdlm.hpp"
#include "dfcr/dfwfm.hpp"
#include "dfcr/gcam.hpp"
#include "dfcr/lfem.hpp"
#include "dfcr/model.hpp"

namespace dfcr {

namespace {

constexpr double kNormFloor = 1e-9;

std::vector<std::size_t> pick_entries(std::size_t size, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit == 0 || limit >= size) return idx;
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Weighted sum with fixed random weights, so every output entry matters.
ag::Var probe(const ag::Var& out, const Tensor& weights) { return ag::sum_all(ag::mul(out, ag::constant(weights))); }

ag::Var leaf(Tensor t) { return ag::Var(std::move(t), true); }

}  // namespace

GradcheckReport gradcheck(const std::string& module, const std::function<ag::Var()>& loss,
                          const nn::ParamList& inputs, const GradcheckOptions& opt) {
  for (const auto& p : inputs) p.var.node()->grad = Tensor();
  {
    auto l = loss();
    if (l.value().size() != 1) throw ShapeError("gradcheck loss must be a scalar, got " + shape_str(l.shape()));
    ag::backward(l);
  }

  GradcheckReport report;
  report.module = module;
  Rng rng(opt.seed ^ 0x5bd1e995ULL);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto& p = inputs[t];
    Tensor analytic = p.var.grad();
    auto entries = pick_entries(p.var.value().size(), opt.max_entries, rng);
    if (opt.corrupt_analytic && t == 0) {
      for (auto i : entries) analytic[i] = analytic[i] * 1.5 + 1e-2;
    }

    double* w = p.var.node()->value.data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    ag::NoGradGuard guard;
    for (auto i : entries) {
      const double saved = w[i];
      w[i] = saved + opt.eps;
      const double lp = loss().value()[0];
      w[i] = saved - opt.eps;
      const double lm = loss().value()[0];
      w[i] = saved;
      const double numeric = (lp - lm) / (2.0 * opt.eps);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    TensorCheck check;
    check.name = p.name;
    check.entries = entries.size();
    check.rel_error = scale < kNormFloor ? 0.0 : std::sqrt(diff2) / scale;
    check.passed = check.rel_error <= opt.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, check.rel_error);
    report.passed = report.passed && check.passed;
    report.tensors.push_back(std::move(check));
  }
  for (const auto& p : inputs) p.var.node()->grad = Tensor();
  return report;
}

std::vector<std::string> gradcheck_modules() { return {"gcam", "cdlm", "lfem", "dfwfm", "model"}; }

namespace {

GradcheckReport check_gcam(const GradcheckOptions& opt) {
  Rng rng(opt.seed);
  GcamParams p(8, 2, rng);
  auto f = leaf(rng.normal_tensor({1, 4, 4, 8}, 1.0));
  Tensor w = rng.normal_tensor({1, 4, 4, 8}, 1.0);
  nn::ParamList in{{"f", f, ""}};
  p.collect(in, "gcam", "");
  return gradcheck("gcam", [&] { return probe(gcam_forward(f, p), w); }, in, opt);
}

GradcheckReport check_cdlm(const GradcheckOptions& opt) {
  Rng rng(opt.seed);
  const std::size_t n = 2, d = 8, k = 4;
  auto dict = make_dictionary(d, k, rng);
  auto transform = make_transform(d, 0.1, rng, 0.1);
  auto x = leaf(rng.normal_tensor({n, d}, 1.0));
  Tensor wz = rng.normal_tensor({n, d, k}, 1.0);
  auto chain = [&](bool stop_gradient) {
    auto basis = collab_basis(dict, transform);
    auto s = solve_coefficients(x, basis, transform.lambda);
    auto y = reconstruct(s, basis);
    auto lc = dictionary_loss(x, y, stop_gradient).mean;
    return ag::add(lc, probe(key_semantic_set(s, basis), wz));
  };
  // Full derivative, x included.
  nn::ParamList all{{"x", x, ""}, {"W", transform.weight, ""}, {"D", dict.atoms, ""}};
  auto report = gradcheck("cdlm", [&] { return chain(false); }, all, opt);
  // Training setting: W and D only, x held fixed.
  GradcheckOptions o2 = opt;
  o2.corrupt_analytic = false;
  nn::ParamList wd{{"W (stop-gradient)", transform.weight, ""}, {"D (stop-gradient)", dict.atoms, ""}};
  auto second = gradcheck("cdlm", [&] { return chain(true); }, wd, o2);
  for (auto& t : second.tensors) report.tensors.push_back(t);
  report.max_rel_error = std::max(report.max_rel_error, second.max_rel_error);
  report.passed = report.passed && second.passed;
  return report;
}

GradcheckReport check_lfem(const GradcheckOptions& opt) {
  Rng rng(opt.seed);
  LfemParams p(8, 4, 4, rng);
  auto f = leaf(rng.normal_tensor({1, 4, 4, 8}, 1.0));
  auto z = leaf(rng.normal_tensor({1, 4, 3}, 1.0));
  Tensor w = rng.normal_tensor({1, 4, 4, 8}, 1.0);
  nn::ParamList in{{"f", f, ""}, {"z", z, ""}};
  p.collect(in, "lfem", "");
  return gradcheck("lfem", [&] { return probe(lfem_forward(f, z, p).output, w); }, in, opt);
}

GradcheckReport check_dfwfm(const GradcheckOptions& opt) {
  Rng rng(opt.seed);
  DfwfmParams p(8, rng);
  auto ft = leaf(rng.normal_tensor({1, 4, 4, 8}, 1.0));
  auto fc = leaf(rng.normal_tensor({1, 4, 4, 8}, 1.0));
  Tensor w = rng.normal_tensor({1, 4, 4, 16}, 1.0);
  nn::ParamList in{{"ft", ft, ""}, {"fc", fc, ""}};
  p.collect(in, "dfwfm", "");
  return gradcheck("dfwfm", [&] { return probe(dfwfm_forward(ft, fc, p).output, w); }, in, opt);
}

bool upstream_of_x(const nn::NamedParam& p) {
  return p.group == "backbone" || p.group == "pyramid" || p.name.rfind("cdlm.input_proj", 0) == 0;
}

GradcheckReport check_model(const GradcheckOptions& opt) {
  GradcheckOptions o = opt;
  if (o.max_entries == 0) o.max_entries = 3;
  ModelConfig cfg = tiny_model_config();
  cfg.lambda = 0.1;
  Rng rng(opt.seed);
  Tensor images = rng.uniform_tensor({2, 16, 16, 9}, -1.0, 1.0);
  const std::vector<std::size_t> labels{0, 2};

  // With the dictionary-loss path through x open, every parameter has a true
  // gradient that finite differences can see.
  cfg.stop_gradient = false;
  DfcrNet open(cfg, opt.seed);
  auto image = ag::constant(images);
  auto report = gradcheck(
      "model", [&] { return total_loss(open.forward(image), labels, cfg.alpha); }, open.parameters(), o);

  // Training setting: only parameters downstream of x see the exact gradient.
  cfg.stop_gradient = true;
  DfcrNet blocked(cfg, opt.seed);
  nn::ParamList downstream;
  for (const auto& p : blocked.parameters()) {
    if (!upstream_of_x(p)) downstream.push_back({p.name + " (stop-gradient)", p.var, p.group});
  }
  o.corrupt_analytic = false;
  auto second = gradcheck(
      "model", [&] { return total_loss(blocked.forward(image), labels, cfg.alpha); }, downstream, o);
  for (auto& t : second.tensors) report.tensors.push_back(t);
  report.max_rel_error = std::max(report.max_rel_error, second.max_rel_error);
  report.passed = report.passed && second.passed;
  return report;
}

}  // namespace

GradcheckReport run_module_gradcheck(const std::string& module, const GradcheckOptions& opt) {
  if (module == "gcam") return check_gcam(opt);
  if (module == "cdlm") return check_cdlm(opt);
  if (module == "lfem") return check_lfem(opt);
  if (module == "dfwfm") return check_dfwfm(opt);
  if (module == "model") return check_model(opt);
  throw ConfigError("unknown gradcheck module '" + module + "'");
}

double dictionary_loss_x_gradient(std::uint64_t seed) {
  Rng rng(seed);
  auto x = leaf(rng.normal_tensor({3, 6}, 1.0));
  auto y = leaf(rng.normal_tensor({3, 6}, 1.0));
  auto l = dictionary_loss(x, y, true).mean;
  ag::backward(l);
  const Tensor g_x = x.grad();
  double worst = 0.0;
  for (double g : g_x.values()) worst = std::max(worst, std::abs(g));
  return worst;
}

}  // namespace dfcr
