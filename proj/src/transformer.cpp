#include "dfcr/transformer.hpp"

#include <algorithm>
#include <cmath>

namespace dfcr {

void BackboneConfig::validate() const {
  if (in_channels == 0 || patch_size == 0 || base_dim == 0 || window_size == 0 || mlp_ratio == 0) {
    throw ConfigError("backbone sizes must be positive");
  }
  if (depths.empty() || depths.size() != num_heads.size()) {
    throw ConfigError("backbone needs one head count per stage");
  }
  for (std::size_t s = 0; s < depths.size(); ++s) {
    if (num_heads[s] == 0 || stage_dim(s) % num_heads[s] != 0) {
      throw ConfigError("stage " + std::to_string(s) + " width " + std::to_string(stage_dim(s)) +
                        " not divisible by " + std::to_string(num_heads[s]) + " heads");
    }
  }
}

void BackboneConfig::validate_input(std::size_t height, std::size_t width) const {
  const std::size_t m = required_multiple();
  if (height == 0 || width == 0 || height % m != 0 || width % m != 0) {
    throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) +
                     " must be a multiple of " + std::to_string(m) + " (patch size " +
                     std::to_string(patch_size) + " times 2^" + std::to_string(num_stages() - 1) + ")");
  }
  for (std::size_t s = 0; s < num_stages(); ++s) {
    const std::size_t h = height / (patch_size << s);
    const std::size_t w = width / (patch_size << s);
    const std::size_t wh = std::min(window_size, h);
    const std::size_t ww = std::min(window_size, w);
    if (h % wh != 0 || w % ww != 0) {
      throw ShapeError("stage " + std::to_string(s) + " size " + std::to_string(h) + "x" +
                       std::to_string(w) + " is not tiled by window " + std::to_string(window_size));
    }
  }
}

ag::Var window_partition(const ag::Var& x, std::size_t wh, std::size_t ww) {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  auto t = ag::reshape(x, {b, h / wh, wh, w / ww, ww, c});
  t = ag::permute(t, {0, 1, 3, 2, 4, 5});
  return ag::reshape(t, {b * (h / wh) * (w / ww), wh * ww, c});
}

ag::Var window_reverse(const ag::Var& windows, std::size_t batch, std::size_t h, std::size_t w,
                       std::size_t wh, std::size_t ww) {
  const std::size_t c = windows.dim(2);
  auto t = ag::reshape(windows, {batch, h / wh, w / ww, wh, ww, c});
  t = ag::permute(t, {0, 1, 3, 2, 4, 5});
  return ag::reshape(t, {batch, h, w, c});
}

ag::Var window_attention(const ag::Var& x, const nn::Linear& qkv, const nn::Linear& proj,
                         std::size_t heads) {
  const std::size_t g = x.dim(0), n = x.dim(1), c = x.dim(2);
  const std::size_t hd = c / heads;
  auto t = ag::reshape(qkv(x), {g, n, 3, heads, hd});
  t = ag::permute(t, {2, 0, 3, 1, 4});
  t = ag::reshape(t, {3, g * heads, n, hd});
  auto pick = [&](std::size_t i) { return ag::reshape(ag::slice(t, 0, i, i + 1), {g * heads, n, hd}); };
  const auto q = pick(0);
  const auto k = pick(1);
  const auto v = pick(2);
  auto scores = ag::mul_scalar(ag::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd)));
  auto ctx = ag::bmm(ag::softmax_last(scores), v);
  ctx = ag::permute(ag::reshape(ctx, {g, heads, n, hd}), {0, 2, 1, 3});
  return proj(ag::reshape(ctx, {g, n, c}));
}

WindowBlock::WindowBlock(std::size_t dim, std::size_t heads_, std::size_t window_, std::size_t mlp_ratio,
                         Rng& rng)
    : norm1(dim),
      qkv(dim, 3 * dim, rng),
      proj(dim, dim, rng),
      norm2(dim),
      fc1(dim, dim * mlp_ratio, rng),
      fc2(dim * mlp_ratio, dim, rng),
      heads(heads_),
      window(window_) {}

ag::Var WindowBlock::operator()(const ag::Var& x) const {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t wh = std::min(window, h);
  const std::size_t ww = std::min(window, w);
  auto windows = window_partition(norm1(x), wh, ww);
  auto attended = window_reverse(window_attention(windows, qkv, proj, heads), b, h, w, wh, ww);
  auto y = ag::add(x, attended);
  return ag::add(y, fc2(ag::gelu(fc1(norm2(y)))));
}

void WindowBlock::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  norm1.collect(out, prefix + ".norm1", group);
  qkv.collect(out, prefix + ".qkv", group);
  proj.collect(out, prefix + ".proj", group);
  norm2.collect(out, prefix + ".norm2", group);
  fc1.collect(out, prefix + ".fc1", group);
  fc2.collect(out, prefix + ".fc2", group);
}

PatchMerging::PatchMerging(std::size_t dim, Rng& rng) : norm(4 * dim), reduce(4 * dim, 2 * dim, rng, false) {}

ag::Var PatchMerging::operator()(const ag::Var& x) const {
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  auto t = ag::reshape(x, {b, h / 2, 2, w / 2, 2, c});
  t = ag::permute(t, {0, 1, 3, 2, 4, 5});
  t = ag::reshape(t, {b, h / 2, w / 2, 4 * c});
  return reduce(norm(t));
}

void PatchMerging::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  norm.collect(out, prefix + ".norm", group);
  reduce.collect(out, prefix + ".reduce", group);
}

TransformerBackbone::TransformerBackbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  patch_embed_ = nn::Conv2d(cfg.in_channels, cfg.base_dim, cfg.patch_size, cfg.patch_size, 0, rng);
  embed_norm_ = nn::LayerNorm(cfg.base_dim);
  for (std::size_t s = 0; s < cfg.num_stages(); ++s) {
    std::vector<WindowBlock> blocks;
    for (std::size_t d = 0; d < cfg.depths[s]; ++d) {
      blocks.emplace_back(cfg.stage_dim(s), cfg.num_heads[s], cfg.window_size, cfg.mlp_ratio, rng);
    }
    stages_.push_back(std::move(blocks));
    if (s + 1 < cfg.num_stages()) merges_.emplace_back(cfg.stage_dim(s), rng);
  }
}

PyramidFeatures TransformerBackbone::operator()(const ag::Var& image) const {
  if (image.rank() != 4 || image.dim(3) != cfg_.in_channels) {
    throw ShapeError("backbone expects [B,H,W," + std::to_string(cfg_.in_channels) + "], got " +
                     shape_str(image.shape()));
  }
  cfg_.validate_input(image.dim(1), image.dim(2));
  PyramidFeatures out;
  auto x = embed_norm_(patch_embed_(image));
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (const auto& block : stages_[s]) x = block(x);
    out.levels.push_back(x);
    if (s < merges_.size()) x = merges_[s](x);
  }
  return out;
}

void TransformerBackbone::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  patch_embed_.collect(out, prefix + ".patch_embed", group);
  embed_norm_.collect(out, prefix + ".embed_norm", group);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t d = 0; d < stages_[s].size(); ++d) {
      stages_[s][d].collect(out, prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(d), group);
    }
    if (s < merges_.size()) merges_[s].collect(out, prefix + ".merge" + std::to_string(s), group);
  }
}

PyramidFuse::PyramidFuse(const std::vector<std::size_t>& dims, std::size_t reduction, bool attention, Rng& rng)
    : dims_(dims), attention_(attention) {
  if (dims.empty()) throw ConfigError("pyramid fusion needs at least one level");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (attention_) gcams_.emplace_back(dims[i], reduction, rng);
    if (i > 0) projections_.emplace_back(dims[i - 1], dims[i], rng);
  }
}

ag::Var PyramidFuse::operator()(const PyramidFeatures& p) const {
  if (p.levels.size() != dims_.size()) {
    throw ConfigError("pyramid has " + std::to_string(p.levels.size()) + " levels, fusion built for " +
                      std::to_string(dims_.size()));
  }
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (p.levels[i].rank() != 4 || p.levels[i].dim(3) != dims_[i]) {
      throw ConfigError("pyramid level " + std::to_string(i) + " has shape " +
                        shape_str(p.levels[i].shape()) + ", expected width " + std::to_string(dims_[i]));
    }
  }
  ag::Var carrier = attention_ ? gcam_forward(p.levels[0], gcams_[0]) : p.levels[0];
  for (std::size_t i = 1; i < dims_.size(); ++i) {
    const auto& level = p.levels[i];
    if (carrier.dim(1) != 2 * level.dim(1) || carrier.dim(2) != 2 * level.dim(2)) {
      throw ShapeError("pyramid level " + std::to_string(i) + " is not half the previous scale");
    }
    auto projected = projections_[i - 1](ag::avg_pool2d(carrier, 2));
    auto gated = attention_ ? scale_channels(level, gcam_weights(projected, gcams_[i])) : level;
    carrier = ag::add(gated, projected);
  }
  return carrier;
}

void PyramidFuse::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  for (std::size_t i = 0; i < gcams_.size(); ++i) gcams_[i].collect(out, prefix + ".gcam" + std::to_string(i), group);
  for (std::size_t i = 0; i < projections_.size(); ++i) {
    projections_[i].collect(out, prefix + ".proj" + std::to_string(i + 1), group);
  }
}

TransformerBranch::TransformerBranch(const BackboneConfig& cfg, std::size_t gcam_reduction, bool gcam, Rng& rng)
    : backbone_(cfg, rng) {
  std::vector<std::size_t> dims;
  for (std::size_t s = 0; s < cfg.num_stages(); ++s) dims.push_back(cfg.stage_dim(s));
  fuse_ = PyramidFuse(dims, gcam_reduction, gcam, rng);
}

TransformerBranch::Output TransformerBranch::operator()(const ag::Var& image) const {
  Output out;
  out.pyramid = backbone_(image);
  out.fused = fuse_(out.pyramid);
  return out;
}

void TransformerBranch::collect(nn::ParamList& out, const std::string& prefix) const {
  backbone_.collect(out, prefix + ".backbone", "backbone");
  fuse_.collect(out, prefix + ".fuse", "pyramid");
}

}  // namespace dfcr
