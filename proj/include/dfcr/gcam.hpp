#pragma once

#include "dfcr/nn.hpp"

namespace dfcr {

/// Global channel attention: a shared two-layer MLP (C -> C/r -> C, rectifier
/// between) scores both the max- and average-pooled channel descriptors; the
/// summed scores pass through a sigmoid and gate the input channels.
struct GcamParams {
  std::size_t channels = 0;
  std::size_t reduction = 1;
  nn::Linear fc1;  // C -> C/r
  nn::Linear fc2;  // C/r -> C

  GcamParams() = default;
  /// Throws ConfigError unless reduction divides channels.
  GcamParams(std::size_t channels, std::size_t reduction, Rng& rng);

  std::size_t hidden() const { return channels / reduction; }
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

/// Shared MLP applied to a pooled descriptor [B,C].
ag::Var gcam_mlp(const ag::Var& pooled, const GcamParams& p);

/// Channel weights sigma(MLP(GMP f) + MLP(GAP f)), shape [B,C], each in (0,1).
ag::Var gcam_weights(const ag::Var& f, const GcamParams& p);

/// f [B,H,W,C] scaled channel-wise by gcam_weights(f).
ag::Var gcam_forward(const ag::Var& f, const GcamParams& p);

/// Broadcast multiply of f [B,H,W,C] by per-sample channel weights [B,C].
ag::Var scale_channels(const ag::Var& f, const ag::Var& weights);

}  // namespace dfcr
