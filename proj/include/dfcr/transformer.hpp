#pragma once

#include <vector>

#include "dfcr/gcam.hpp"
#include "dfcr/nn.hpp"

namespace dfcr {

/// Hierarchical windowed self-attention backbone settings.
struct BackboneConfig {
  std::size_t in_channels = 9;
  std::size_t patch_size = 4;
  std::size_t base_dim = 32;
  std::vector<std::size_t> depths{2, 2, 2, 2};
  std::size_t window_size = 4;
  std::vector<std::size_t> num_heads{2, 4, 8, 16};
  std::size_t mlp_ratio = 4;

  std::size_t num_stages() const { return depths.size(); }
  std::size_t stage_dim(std::size_t s) const { return base_dim << s; }
  /// patch_size * 2^(stages-1): every stage then has an integral size.
  std::size_t required_multiple() const { return patch_size << (num_stages() - 1); }

  void validate() const;
  /// Throws ShapeError naming the required multiple.
  void validate_input(std::size_t height, std::size_t width) const;
};

/// One feature map per stage, finest first.
struct PyramidFeatures {
  std::vector<ag::Var> levels;
};

/// Pre-norm transformer block over non-overlapping local windows.
struct WindowBlock {
  nn::LayerNorm norm1;
  nn::Linear qkv;
  nn::Linear proj;
  nn::LayerNorm norm2;
  nn::Linear fc1;
  nn::Linear fc2;
  std::size_t heads = 1;
  std::size_t window = 1;

  WindowBlock() = default;
  WindowBlock(std::size_t dim, std::size_t heads, std::size_t window, std::size_t mlp_ratio, Rng& rng);

  ag::Var operator()(const ag::Var& x) const;
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

/// Split [B,H,W,C] into [B*nWin, wh*ww, C] windows, and back.
ag::Var window_partition(const ag::Var& x, std::size_t wh, std::size_t ww);
ag::Var window_reverse(const ag::Var& windows, std::size_t batch, std::size_t h, std::size_t w,
                       std::size_t wh, std::size_t ww);

/// Multi-head self-attention within each window; x is [G, N, C].
ag::Var window_attention(const ag::Var& x, const nn::Linear& qkv, const nn::Linear& proj,
                         std::size_t heads);

/// 2x2 neighbourhood merge: [B,H,W,C] -> [B,H/2,W/2,2C].
struct PatchMerging {
  nn::LayerNorm norm;
  nn::Linear reduce;

  PatchMerging() = default;
  PatchMerging(std::size_t dim, Rng& rng);

  ag::Var operator()(const ag::Var& x) const;
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;
};

class TransformerBackbone {
 public:
  TransformerBackbone() = default;
  TransformerBackbone(const BackboneConfig& cfg, Rng& rng);

  const BackboneConfig& config() const { return cfg_; }
  /// image [B,H,W,in_channels] -> stage maps at H/p, H/2p, ... with C1, 2C1, ...
  PyramidFeatures operator()(const ag::Var& image) const;
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;

 private:
  BackboneConfig cfg_;
  nn::Conv2d patch_embed_;
  nn::LayerNorm embed_norm_;
  std::vector<std::vector<WindowBlock>> stages_;
  std::vector<PatchMerging> merges_;
};

/// Bottom-up fusion of the pyramid. Level 0 seeds the carrier with
/// gcam_forward(F_0). Every later level pools the carrier by 2, projects it to
/// that level's width, derives GCAM weights from the projection, gates F_i
/// with them and adds the projection back: R_i = w(P_i) * F_i + P_i.
/// With attention disabled the gates are identity: R_0 = F_0, R_i = F_i + P_i.
class PyramidFuse {
 public:
  PyramidFuse() = default;
  /// `dims` lists the channel width of every level, finest first.
  PyramidFuse(const std::vector<std::size_t>& dims, std::size_t reduction, bool attention, Rng& rng);

  ag::Var operator()(const PyramidFeatures& p) const;
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;

  std::vector<GcamParams>& gcams() { return gcams_; }
  std::vector<nn::Linear>& projections() { return projections_; }
  bool attention() const { return attention_; }

 private:
  std::vector<std::size_t> dims_;
  bool attention_ = true;
  std::vector<GcamParams> gcams_;
  std::vector<nn::Linear> projections_;  // level i-1 width -> level i width
};

/// Global (transformer) branch: backbone followed by pyramid fusion.
class TransformerBranch {
 public:
  struct Output {
    PyramidFeatures pyramid;
    ag::Var fused;  // coarsest scale, widest channels
  };

  TransformerBranch() = default;
  TransformerBranch(const BackboneConfig& cfg, std::size_t gcam_reduction, bool gcam, Rng& rng);

  Output operator()(const ag::Var& image) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  const BackboneConfig& config() const { return backbone_.config(); }

 private:
  TransformerBackbone backbone_;
  PyramidFuse fuse_;
};

}  // namespace dfcr
