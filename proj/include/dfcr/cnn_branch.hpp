#pragma once

#include <variant>
#include <vector>

#include "dfcr/attention_zoo.hpp"
#include "dfcr/lfem.hpp"

namespace dfcr {

struct CnnConfig {
  std::size_t in_channels = 9;
  std::vector<std::size_t> widths{32, 64, 128, 256};
  std::vector<std::size_t> blocks{2, 2, 2, 2};
  std::size_t stem_stride = 4;

  std::size_t num_stages() const { return widths.size(); }
  std::size_t required_multiple() const { return stem_stride << (num_stages() - 1); }
  void validate() const;
  void validate_input(std::size_t height, std::size_t width) const;
};

/// Which attention block sits on each unified layer, and its sizes.
struct AttentionSettings {
  AttentionVariant variant = AttentionVariant::CdlmLfem;
  bool enabled = true;             // false: identity pass-through
  std::size_t feature_dim = 64;    // d, key-set row count (CDLM+LFEM)
  std::size_t lfem_width = 64;     // C'
  std::size_t se_reduction = 16;
  std::size_t eca_kernel = 0;      // 0: adaptive
  std::size_t cbam_reduction = 16;
  std::size_t cbam_spatial_kernel = 7;
};

/// Two 3×3 convolutions with an identity (or 1×1 projection) shortcut.
struct ResidualBlock {
  nn::Conv2d conv1;
  nn::Conv2d conv2;
  nn::Conv2d shortcut;  // undefined weight when identity
  bool project = false;

  ResidualBlock() = default;
  ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng);

  ag::Var operator()(const ag::Var& x) const;
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

using LayerAttention = std::variant<std::monostate, LfemParams, SeParams, EcaParams, CbamParams>;

class CnnBranch {
 public:
  struct Output {
    ag::Var fused;                    // element-wise sum over layers
    std::vector<ag::Var> attention;   // LFEM attention per layer (CDLM+LFEM only)
  };

  CnnBranch() = default;
  CnnBranch(const CnnConfig& cfg, const AttentionSettings& attention, Rng& rng);

  const CnnConfig& config() const { return cfg_; }
  const AttentionSettings& attention_settings() const { return attn_; }

  /// image [B,H,W,Cin] -> one map per stage, halving scale after the stem.
  std::vector<ag::Var> backbone(const ag::Var& image) const;
  /// Projects every stage to the last stage's channels (1×1) and pools it to
  /// the last stage's size; the last stage passes through untouched.
  std::vector<ag::Var> unify(const std::vector<ag::Var>& stages) const;
  /// key_set [B,d,K] is required for CDLM+LFEM and ignored otherwise.
  Output operator()(const ag::Var& image, const ag::Var& key_set) const;

  /// Attention applied to one unified layer.
  ag::Var attend(std::size_t layer, const ag::Var& f, const ag::Var& key_set, ag::Var* attention) const;

  void collect(nn::ParamList& out, const std::string& prefix) const;

  std::vector<LayerAttention>& layer_attention() { return attention_; }
  std::vector<nn::Linear>& unify_projections() { return unify_proj_; }

 private:
  CnnConfig cfg_;
  AttentionSettings attn_;
  nn::Conv2d stem_;
  std::vector<std::vector<ResidualBlock>> stages_;
  std::vector<nn::Linear> unify_proj_;  // one per non-final stage
  std::vector<LayerAttention> attention_;
};

}  // namespace dfcr
