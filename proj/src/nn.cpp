#include "dfcr/nn.hpp"

#include <cmath>

namespace dfcr::nn {

std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

std::size_t count_parameters(const ParamList& params, const std::string& group) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.group == group) n += p.var.value().size();
  }
  return n;
}

ag::Var make_param(Tensor t) { return ag::Var(std::move(t), true); }

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  if (in == 0 || out == 0) throw ConfigError("linear layer with zero width");
  weight = make_param(rng.normal_tensor({in, out}, std::sqrt(1.0 / static_cast<double>(in))));
  if (with_bias) bias = make_param(Tensor({out}));
}

ag::Var Linear::operator()(const ag::Var& x) const {
  if (x.shape().back() != in_features()) {
    throw ConfigError("linear layer expects " + std::to_string(in_features()) + " features, got " +
                      shape_str(x.shape()));
  }
  auto y = ag::matmul(x, weight);
  return bias.defined() ? ag::add(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix, const std::string& group) const {
  out.push_back({prefix + ".weight", weight, group});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, group});
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_,
               std::size_t pad_, Rng& rng, bool with_bias)
    : stride(stride_), pad(pad_) {
  const double fan_in = static_cast<double>(kernel * kernel * in);
  weight = make_param(rng.normal_tensor({kernel, kernel, in, out}, std::sqrt(2.0 / fan_in)));
  if (with_bias) bias = make_param(Tensor({out}));
}

ag::Var Conv2d::operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }

void Conv2d::collect(ParamList& out, const std::string& prefix, const std::string& group) const {
  out.push_back({prefix + ".weight", weight, group});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, group});
}

DepthwiseConv2d::DepthwiseConv2d(std::size_t channels, std::size_t kernel, Rng& rng)
    : pad(kernel / 2) {
  const double fan_in = static_cast<double>(kernel * kernel);
  weight = make_param(rng.normal_tensor({kernel, kernel, channels}, std::sqrt(1.0 / fan_in)));
  bias = make_param(Tensor({channels}));
}

ag::Var DepthwiseConv2d::operator()(const ag::Var& x) const {
  return ag::depthwise_conv2d(x, weight, bias, 1, pad);
}

void DepthwiseConv2d::collect(ParamList& out, const std::string& prefix, const std::string& group) const {
  out.push_back({prefix + ".weight", weight, group});
  out.push_back({prefix + ".bias", bias, group});
}

LayerNorm::LayerNorm(std::size_t channels)
    : gamma(make_param(Tensor({channels}, 1.0))), beta(make_param(Tensor({channels}))) {}

ag::Var LayerNorm::operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParamList& out, const std::string& prefix, const std::string& group) const {
  out.push_back({prefix + ".gamma", gamma, group});
  out.push_back({prefix + ".beta", beta, group});
}

void zero_all(const ParamList& params) {
  for (const auto& p : params) {
    ag::Var v = p.var;
    v.mutable_value().fill(0.0);
  }
}

}  // namespace dfcr::nn
