#pragma once

#include <string>
#include <vector>

#include "dfcr/autograd.hpp"

namespace dfcr::nn {

/// A trainable tensor with its checkpoint name and accounting group.
struct NamedParam {
  std::string name;
  ag::Var var;
  std::string group;
};

using ParamList = std::vector<NamedParam>;

std::size_t count_parameters(const ParamList& params);
std::size_t count_parameters(const ParamList& params, const std::string& group);

ag::Var make_param(Tensor t);

/// Fully connected map on the last axis; weight is [in, out].
struct Linear {
  ag::Var weight;
  ag::Var bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamList& out, const std::string& prefix, const std::string& group) const;
};

/// NHWC convolution with square kernels.
struct Conv2d {
  ag::Var weight;  // [k,k,Cin,Cout]
  ag::Var bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad,
         Rng& rng, bool with_bias = true);

  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamList& out, const std::string& prefix, const std::string& group) const;
};

struct DepthwiseConv2d {
  ag::Var weight;  // [k,k,C]
  ag::Var bias;
  std::size_t pad = 0;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(std::size_t channels, std::size_t kernel, Rng& rng);

  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamList& out, const std::string& prefix, const std::string& group) const;
};

struct LayerNorm {
  ag::Var gamma;
  ag::Var beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t channels);

  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamList& out, const std::string& prefix, const std::string& group) const;
};

/// Overwrites every parameter value with zero (used by degenerate-case tests).
void zero_all(const ParamList& params);

}  // namespace dfcr::nn
