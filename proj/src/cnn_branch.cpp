#include "dfcr/cnn_branch.hpp"

namespace dfcr {

void CnnConfig::validate() const {
  if (in_channels == 0 || stem_stride == 0) throw ConfigError("CNN sizes must be positive");
  if (widths.empty() || widths.size() != blocks.size()) {
    throw ConfigError("CNN config needs one block count per stage width");
  }
  for (auto w : widths) {
    if (w == 0) throw ConfigError("CNN stage width must be positive");
  }
}

void CnnConfig::validate_input(std::size_t height, std::size_t width) const {
  const std::size_t m = required_multiple();
  if (height == 0 || width == 0 || height % m != 0 || width % m != 0) {
    throw ShapeError("CNN input " + std::to_string(height) + "x" + std::to_string(width) +
                     " must be a multiple of " + std::to_string(m));
  }
}

ResidualBlock::ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
    : conv1(in, out, 3, stride, 1, rng), conv2(out, out, 3, 1, 1, rng), project(in != out || stride != 1) {
  if (project) shortcut = nn::Conv2d(in, out, 1, stride, 0, rng);
}

ag::Var ResidualBlock::operator()(const ag::Var& x) const {
  auto y = conv2(ag::relu(conv1(x)));
  return ag::relu(ag::add(y, project ? shortcut(x) : x));
}

void ResidualBlock::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  conv1.collect(out, prefix + ".conv1", group);
  conv2.collect(out, prefix + ".conv2", group);
  if (project) shortcut.collect(out, prefix + ".shortcut", group);
}

CnnBranch::CnnBranch(const CnnConfig& cfg, const AttentionSettings& attention, Rng& rng)
    : cfg_(cfg), attn_(attention) {
  cfg_.validate();
  if (cfg.stem_stride > 1) {
    stem_ = nn::Conv2d(cfg.in_channels, cfg.widths[0], cfg.stem_stride, cfg.stem_stride, 0, rng);
  } else {
    stem_ = nn::Conv2d(cfg.in_channels, cfg.widths[0], 3, 1, 1, rng);
  }
  std::size_t in = cfg.widths[0];
  for (std::size_t s = 0; s < cfg.num_stages(); ++s) {
    std::vector<ResidualBlock> blocks;
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      blocks.emplace_back(in, cfg.widths[s], stride, rng);
      in = cfg.widths[s];
    }
    if (cfg.blocks[s] == 0 && s > 0) {
      throw ConfigError("CNN stage " + std::to_string(s) + " needs at least one block to downsample");
    }
    stages_.push_back(std::move(blocks));
  }
  const std::size_t last = cfg.widths.back();
  for (std::size_t s = 0; s + 1 < cfg.num_stages(); ++s) unify_proj_.emplace_back(cfg.widths[s], last, rng);

  for (std::size_t s = 0; s < cfg.num_stages(); ++s) {
    if (!attn_.enabled) {
      attention_.emplace_back(std::monostate{});
      continue;
    }
    switch (attn_.variant) {
      case AttentionVariant::CdlmLfem:
        attention_.emplace_back(LfemParams(last, attn_.feature_dim, attn_.lfem_width, rng));
        break;
      case AttentionVariant::Se:
        attention_.emplace_back(SeParams(last, attn_.se_reduction, rng));
        break;
      case AttentionVariant::Eca:
        attention_.emplace_back(EcaParams(last, attn_.eca_kernel, rng));
        break;
      case AttentionVariant::Cbam:
        attention_.emplace_back(CbamParams(last, attn_.cbam_reduction, attn_.cbam_spatial_kernel, rng));
        break;
    }
  }
}

std::vector<ag::Var> CnnBranch::backbone(const ag::Var& image) const {
  if (image.rank() != 4 || image.dim(3) != cfg_.in_channels) {
    throw ShapeError("CNN branch expects [B,H,W," + std::to_string(cfg_.in_channels) + "], got " +
                     shape_str(image.shape()));
  }
  cfg_.validate_input(image.dim(1), image.dim(2));
  std::vector<ag::Var> out;
  auto x = ag::relu(stem_(image));
  for (const auto& stage : stages_) {
    for (const auto& block : stage) x = block(x);
    out.push_back(x);
  }
  return out;
}

std::vector<ag::Var> CnnBranch::unify(const std::vector<ag::Var>& stages) const {
  if (stages.empty()) throw ShapeError("unify needs at least one stage");
  if (stages.size() != unify_proj_.size() + 1) {
    throw ConfigError("unify built for " + std::to_string(unify_proj_.size() + 1) + " stages, got " +
                      std::to_string(stages.size()));
  }
  const auto& target = stages.back();
  std::vector<ag::Var> out;
  for (std::size_t s = 0; s + 1 < stages.size(); ++s) {
    const auto& f = stages[s];
    if (f.dim(1) % target.dim(1) || f.dim(2) % target.dim(2) || f.dim(1) / target.dim(1) != f.dim(2) / target.dim(2)) {
      throw ShapeError("stage " + shape_str(f.shape()) + " cannot be pooled to " + shape_str(target.shape()));
    }
    out.push_back(ag::avg_pool2d(unify_proj_[s](f), f.dim(1) / target.dim(1)));
  }
  out.push_back(target);
  return out;
}

ag::Var CnnBranch::attend(std::size_t layer, const ag::Var& f, const ag::Var& key_set, ag::Var* attention) const {
  const auto& a = attention_.at(layer);
  if (const auto* p = std::get_if<LfemParams>(&a)) {
    if (!key_set.defined()) throw ConfigError("CDLM+LFEM attention needs a key semantic set");
    auto r = lfem_forward(f, key_set, *p);
    if (attention) *attention = r.attention;
    return r.output;
  }
  if (const auto* p = std::get_if<SeParams>(&a)) return se_forward(f, *p);
  if (const auto* p = std::get_if<EcaParams>(&a)) return eca_forward(f, *p);
  if (const auto* p = std::get_if<CbamParams>(&a)) return cbam_forward(f, *p);
  return f;
}

CnnBranch::Output CnnBranch::operator()(const ag::Var& image, const ag::Var& key_set) const {
  const auto unified = unify(backbone(image));
  Output out;
  for (std::size_t l = 0; l < unified.size(); ++l) {
    ag::Var attn;
    auto y = attend(l, unified[l], key_set, &attn);
    if (attn.defined()) out.attention.push_back(attn);
    out.fused = out.fused.defined() ? ag::add(out.fused, y) : y;
  }
  return out;
}

void CnnBranch::collect(nn::ParamList& out, const std::string& prefix) const {
  stem_.collect(out, prefix + ".stem", "cnn");
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      stages_[s][b].collect(out, prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b), "cnn");
    }
  }
  for (std::size_t s = 0; s < unify_proj_.size(); ++s) {
    unify_proj_[s].collect(out, prefix + ".unify" + std::to_string(s), "cnn");
  }
  for (std::size_t l = 0; l < attention_.size(); ++l) {
    const std::string p = prefix + ".attn" + std::to_string(l);
    std::visit(
        [&](const auto& a) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(a)>, std::monostate>) a.collect(out, p, "attention");
        },
        attention_[l]);
  }
}

}  // namespace dfcr
