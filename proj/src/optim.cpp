#include "dfcr/optim.hpp"

#include <cmath>

namespace dfcr {

Adam::Adam(nn::ParamList params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& node = *params_[i].var.node();
    if (node.grad.shape() != node.value.shape()) continue;  // no gradient reached it
    double* w = node.value.data();
    const double* g = node.grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < node.value.size(); ++j) {
      const double gj = g[j] + opts_.weight_decay * w[j];
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * gj;
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * gj * gj;
      w[j] -= opts_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opts_.eps);
    }
  }
}

}  // namespace dfcr
