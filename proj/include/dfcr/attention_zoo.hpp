#pragma once

#include <string>

#include "dfcr/gcam.hpp"
#include "dfcr/nn.hpp"

namespace dfcr {

enum class AttentionVariant { Se, Eca, Cbam, CdlmLfem };

std::string to_string(AttentionVariant v);
/// Accepts "se", "eca", "cbam", "cdlm_lfem".
AttentionVariant parse_attention(const std::string& name);

/// Squeeze-and-excitation: GAP -> C/r -> C -> sigmoid gate.
struct SeParams {
  std::size_t channels = 0;
  std::size_t reduction = 1;
  nn::Linear fc1;
  nn::Linear fc2;

  SeParams() = default;
  SeParams(std::size_t channels, std::size_t reduction, Rng& rng);
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

/// Efficient channel attention: GAP -> 1-D convolution across channels.
struct EcaParams {
  std::size_t kernel = 3;
  ag::Var weight;  // [kernel]

  EcaParams() = default;
  /// kernel 0 selects eca_kernel_size(channels); even kernels are rejected.
  EcaParams(std::size_t channels, std::size_t kernel, Rng& rng);
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

/// Adaptive kernel size t = |(log2 C + 1) / 2|, bumped to the next odd value.
std::size_t eca_kernel_size(std::size_t channels);

/// Convolutional block attention: channel gate (same math as GCAM) followed
/// by a spatial gate from a k×k convolution over [mean_c, max_c].
struct CbamParams {
  GcamParams channel;
  nn::Conv2d spatial;  // [k,k,2,1]

  CbamParams() = default;
  CbamParams(std::size_t channels, std::size_t reduction, std::size_t spatial_kernel, Rng& rng);
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

ag::Var se_forward(const ag::Var& f, const SeParams& p);
ag::Var eca_forward(const ag::Var& f, const EcaParams& p);
ag::Var cbam_forward(const ag::Var& f, const CbamParams& p);

/// Zero-padded 1-D convolution along the channel axis of x [B,C], no bias.
ag::Var channel_conv1d(const ag::Var& x, const ag::Var& kernel);

}  // namespace dfcr
