#pragma once

#include "dfcr/nn.hpp"

namespace dfcr {

/// Projections that bring flattened features (C) and key-set columns (d)
/// into a shared width C'.
struct LfemParams {
  nn::Linear fc_f;  // C -> C'
  nn::Linear fc_z;  // d -> C'

  LfemParams() = default;
  LfemParams(std::size_t channels, std::size_t feature_dim, std::size_t width, Rng& rng);

  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

struct LfemResult {
  ag::Var output;     // [B,H,W,C]
  ag::Var attention;  // [B,N], each row sums to 1
};

/// Local feature enhancement.
///
/// f [B,H,W,C] is flattened to N = H*W rows, z [B,d,K] is the per-sample key
/// semantic set. T = fc_f(f) fc_z(z^T)^T is N×K; each position's contribution
/// is the mean of its row of T (over the K semantic columns); a softmax over
/// the N positions gives the attention a, and the result is f + a * f.
LfemResult lfem_forward(const ag::Var& f, const ag::Var& z, const LfemParams& p);

}  // namespace dfcr
