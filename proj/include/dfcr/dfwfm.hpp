#pragma once

#include "dfcr/nn.hpp"

namespace dfcr {

/// Depthwise 3×3 followed by pointwise 1×1, no nonlinearity in between.
struct SeparableConv {
  nn::DepthwiseConv2d depthwise;
  nn::Linear pointwise;

  SeparableConv() = default;
  SeparableConv(std::size_t channels, Rng& rng);

  ag::Var operator()(const ag::Var& x) const;
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

struct DfwfmParams {
  std::size_t channels = 0;
  SeparableConv sep_t;      // transformer branch
  SeparableConv sep_c;      // CNN branch
  SeparableConv sep_joint;  // summed branch
  nn::Linear mix_t;         // 1×1, 2C -> C
  nn::Linear mix_c;         // 1×1, 2C -> C

  DfwfmParams() = default;
  DfwfmParams(std::size_t channels, Rng& rng);

  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

struct DfwfmResult {
  ag::Var output;    // [B,H,W,2C]
  ag::Var weight_t;  // [B,C], sigmoid(GAP(ft))
  ag::Var weight_c;  // [B,C], sigmoid(GMP(fc))
};

/// Weighted two-branch fusion:
///   ft' = ft * sigmoid(GAP ft),  fc' = fc * sigmoid(GMP fc),  f3 = ft' + fc'
///   d_t, d_c, d_3 = separable 3×3 of ft', fc', f3
///   c_t = relu(mix_t[d_t, d_3] + ft'),  c_c = relu(mix_c[d_c, d_3] + fc')
///   output = [c_t, c_c]
DfwfmResult dfwfm_forward(const ag::Var& ft, const ag::Var& fc, const DfwfmParams& p);

}  // namespace dfcr
