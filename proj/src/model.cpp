#include "dfcr/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dfcr {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

void ModelConfig::validate() const {
  backbone.validate();
  cnn.validate();
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(alpha >= 0.0)) throw ConfigError("loss weight alpha must be non-negative");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (cnn.in_channels != backbone.in_channels) throw ConfigError("CNN and transformer band counts differ");
  if (cnn.num_stages() != backbone.num_stages() || cnn.stem_stride != backbone.patch_size) {
    throw ConfigError("CNN final stage scale must match the transformer's coarsest scale: use the same stage "
                      "count and stem_stride == patch_size");
  }
  if (feature_dim == 0 || lfem_width == 0 || fusion_channels == 0) throw ConfigError("model widths must be positive");
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.backbone.patch_size = 2;
  c.backbone.base_dim = 4;
  c.backbone.depths = {1, 1, 1, 1};
  c.backbone.num_heads = {1, 1, 2, 2};
  c.backbone.window_size = 2;
  c.backbone.mlp_ratio = 2;
  c.cnn.widths = {4, 4, 8, 8};
  c.cnn.blocks = {1, 1, 1, 1};
  c.cnn.stem_stride = 2;
  c.gcam_reduction = 2;
  c.feature_dim = 4;
  c.lfem_width = 4;
  c.fusion_channels = 4;
  c.num_classes = 3;
  c.se_reduction = 2;
  c.cbam_reduction = 2;
  c.cbam_spatial_kernel = 3;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"backbone",
       {{"in_channels", c.backbone.in_channels},
        {"patch_size", c.backbone.patch_size},
        {"base_dim", c.backbone.base_dim},
        {"depths", c.backbone.depths},
        {"window_size", c.backbone.window_size},
        {"num_heads", c.backbone.num_heads},
        {"mlp_ratio", c.backbone.mlp_ratio}}},
      {"cnn", {{"widths", c.cnn.widths}, {"blocks", c.cnn.blocks}, {"stem_stride", c.cnn.stem_stride}}},
      {"gcam_reduction", c.gcam_reduction},
      {"feature_dim", c.feature_dim},
      {"lambda", c.lambda},
      {"lfem_width", c.lfem_width},
      {"fusion_channels", c.fusion_channels},
      {"num_classes", c.num_classes},
      {"alpha", c.alpha},
      {"attention", to_string(c.attention)},
      {"se_reduction", c.se_reduction},
      {"eca_kernel", c.eca_kernel},
      {"cbam_reduction", c.cbam_reduction},
      {"cbam_spatial_kernel", c.cbam_spatial_kernel},
      {"toggles", {{"gcam", c.toggles.gcam}, {"cdlm_lfem", c.toggles.cdlm_lfem}, {"dfwfm", c.toggles.dfwfm}}},
      {"stop_gradient", c.stop_gradient}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    d.backbone.in_channels = b.value("in_channels", d.backbone.in_channels);
    d.backbone.patch_size = b.value("patch_size", d.backbone.patch_size);
    d.backbone.base_dim = b.value("base_dim", d.backbone.base_dim);
    d.backbone.depths = b.value("depths", d.backbone.depths);
    d.backbone.window_size = b.value("window_size", d.backbone.window_size);
    d.backbone.num_heads = b.value("num_heads", d.backbone.num_heads);
    d.backbone.mlp_ratio = b.value("mlp_ratio", d.backbone.mlp_ratio);
  }
  d.cnn.in_channels = d.backbone.in_channels;
  if (j.contains("cnn")) {
    const auto& n = j.at("cnn");
    d.cnn.widths = n.value("widths", d.cnn.widths);
    d.cnn.blocks = n.value("blocks", d.cnn.blocks);
    d.cnn.stem_stride = n.value("stem_stride", d.backbone.patch_size);
  } else {
    d.cnn.stem_stride = d.backbone.patch_size;
  }
  d.gcam_reduction = j.value("gcam_reduction", d.gcam_reduction);
  d.feature_dim = j.value("feature_dim", d.feature_dim);
  d.lambda = j.value("lambda", d.lambda);
  d.lfem_width = j.value("lfem_width", d.lfem_width);
  d.fusion_channels = j.value("fusion_channels", d.fusion_channels);
  d.num_classes = j.value("num_classes", d.num_classes);
  d.alpha = j.value("alpha", d.alpha);
  d.attention = parse_attention(j.value("attention", to_string(d.attention)));
  d.se_reduction = j.value("se_reduction", d.se_reduction);
  d.eca_kernel = j.value("eca_kernel", d.eca_kernel);
  d.cbam_reduction = j.value("cbam_reduction", d.cbam_reduction);
  d.cbam_spatial_kernel = j.value("cbam_spatial_kernel", d.cbam_spatial_kernel);
  if (j.contains("toggles")) {
    const auto& t = j.at("toggles");
    d.toggles.gcam = t.value("gcam", true);
    d.toggles.cdlm_lfem = t.value("cdlm_lfem", true);
    d.toggles.dfwfm = t.value("dfwfm", true);
  }
  d.stop_gradient = j.value("stop_gradient", true);
  c = d;
}

namespace {

void require_finite(const ag::Var& v, const char* stage) {
  if (!v.value().all_finite()) throw NumericError(std::string("non-finite values in ") + stage + " output");
}

}  // namespace

DfcrNet::DfcrNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  transformer_ = TransformerBranch(cfg.backbone, cfg.gcam_reduction, cfg.toggles.gcam, rng);
  const std::size_t global_width = cfg.backbone.stage_dim(cfg.backbone.num_stages() - 1);
  if (cfg_.uses_cdlm()) cdlm_.emplace(global_width, cfg.feature_dim, cfg.num_classes, cfg.lambda, rng);
  AttentionSettings attn;
  attn.variant = cfg.attention;
  attn.enabled = cfg.toggles.cdlm_lfem;
  attn.feature_dim = cfg.feature_dim;
  attn.lfem_width = cfg.lfem_width;
  attn.se_reduction = cfg.se_reduction;
  attn.eca_kernel = cfg.eca_kernel;
  attn.cbam_reduction = cfg.cbam_reduction;
  attn.cbam_spatial_kernel = cfg.cbam_spatial_kernel;
  cnn_ = CnnBranch(cfg.cnn, attn, rng);
  proj_t_ = nn::Linear(global_width, cfg.fusion_channels, rng);
  proj_c_ = nn::Linear(cfg.cnn.widths.back(), cfg.fusion_channels, rng);
  if (cfg.toggles.dfwfm) dfwfm_ = DfwfmParams(cfg.fusion_channels, rng);
  head_ = nn::Linear(2 * cfg.fusion_channels, cfg.num_classes, rng);
}

ModelOutput DfcrNet::forward(const ag::Var& image) const {
  ModelOutput out;
  auto global = transformer_(image);
  require_finite(global.fused, "transformer branch");

  ag::Var key_set;
  if (cdlm_) {
    auto c = (*cdlm_)(global.fused, cfg_.stop_gradient);
    require_finite(c.coefficients, "CDLM coefficient solve");
    key_set = c.key_set;
    out.dictionary_loss = c.loss.mean;
    out.skipped_dictionary_samples = c.loss.skipped;
    out.coefficients = c.coefficients.value();
  }

  auto local = cnn_(image, key_set);
  require_finite(local.fused, "CNN branch");
  for (const auto& a : local.attention) {
    const std::size_t b = a.dim(0), n = a.dim(1);
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a.value()[i * n + j];
      out.attention_sums.push_back(s);
    }
  }

  auto ft = proj_t_(global.fused);
  auto fc = proj_c_(local.fused);
  ag::Var fused = cfg_.toggles.dfwfm ? dfwfm_forward(ft, fc, dfwfm_).output : ag::concat({ft, fc}, 3);
  require_finite(fused, "fusion");
  out.logits = head_(ag::global_avg_pool(fused));
  require_finite(out.logits, "classifier head");
  return out;
}

nn::ParamList DfcrNet::parameters() const {
  nn::ParamList p;
  transformer_.collect(p, "transformer");
  if (cdlm_) cdlm_->collect(p, "cdlm", "attention");
  cnn_.collect(p, "cnn");
  proj_t_.collect(p, "fusion.proj_t", "fusion");
  proj_c_.collect(p, "fusion.proj_c", "fusion");
  if (cfg_.toggles.dfwfm) dfwfm_.collect(p, "fusion.dfwfm", "fusion");
  head_.collect(p, "head", "head");
  return p;
}

std::size_t DfcrNet::parameter_count() const { return nn::count_parameters(parameters()); }

std::size_t DfcrNet::parameter_count_excluding(const std::string& group) const {
  const auto p = parameters();
  return nn::count_parameters(p) - nn::count_parameters(p, group);
}

ag::Var cross_entropy(const ag::Var& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw InputError("cross entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  for (auto l : labels) {
    if (l >= k) throw InputError("label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
  }
  Tensor probs({b, k});
  double loss = 0.0;
  const double* z = logits.value().data();
  for (std::size_t i = 0; i < b; ++i) {
    double m = z[i * k];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, z[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[i * k + j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(z[i * k + j] - lse);
    loss += lse - z[i * k + labels[i]];
  }
  loss /= static_cast<double>(b);
  auto nl = logits.node();
  return ag::make_result(Tensor::scalar(loss), {logits},
                         [nl, probs = std::move(probs), labels, b, k](const Tensor& g, const Tensor&) {
                           double* gl = nl->grad_buffer().data();
                           const double scale = g[0] / static_cast<double>(b);
                           for (std::size_t i = 0; i < b; ++i) {
                             for (std::size_t j = 0; j < k; ++j) {
                               gl[i * k + j] += scale * (probs[i * k + j] - (j == labels[i] ? 1.0 : 0.0));
                             }
                           }
                         });
}

ag::Var total_loss(const ModelOutput& out, const std::vector<std::size_t>& labels, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("loss weight alpha must be non-negative");
  auto loss = cross_entropy(out.logits, labels);
  if (out.dictionary_loss.defined() && alpha > 0.0) {
    loss = ag::add(loss, ag::mul_scalar(out.dictionary_loss, alpha));
  }
  return loss;
}

std::vector<std::size_t> predict(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predict expects [B,K] logits");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<std::size_t> out(b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + out[i]]) out[i] = j;
    }
  }
  return out;
}

namespace {

constexpr char kMagic[5] = {'D', 'F', 'C', 'R', '1'};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["config"] = ckpt.config;
  header["seed"] = ckpt.seed;
  header["step"] = ckpt.step;
  header["metadata"] = ckpt.metadata;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(sizeof(kMagic) + 8 + text.size() + offset * 8);
  std::uint8_t* p = out.data();
  std::memcpy(p, kMagic, sizeof(kMagic));
  p += sizeof(kMagic);
  const std::uint64_t len = text.size();
  std::memcpy(p, &len, 8);
  p += 8;
  std::memcpy(p, text.data(), text.size());
  p += text.size();
  for (const auto& [name, t] : ckpt.tensors) {
    std::memcpy(p, t.data(), t.size() * 8);
    p += t.size() * 8;
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw InputError("not a DFCR1 checkpoint (bad magic)");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), 8);
  const std::size_t start = sizeof(kMagic) + 8;
  if (len > bytes.size() - start) throw InputError("checkpoint header truncated");
  const auto header = nlohmann::json::parse(bytes.begin() + static_cast<long>(start),
                                            bytes.begin() + static_cast<long>(start + len));
  Checkpoint c;
  c.config = header.at("config");
  c.seed = header.at("seed").get<std::uint64_t>();
  c.step = header.at("step").get<std::uint64_t>();
  c.metadata = header.value("metadata", nlohmann::json::object());
  const std::size_t payload = start + len;
  const std::size_t doubles = (bytes.size() - payload) / 8;
  for (const auto& t : header.at("tensors")) {
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (count != shape_numel(shape) || offset + count > doubles) throw InputError("checkpoint tensor table corrupt");
    std::vector<double> v(count);
    std::memcpy(v.data(), bytes.data() + payload + offset * 8, count * 8);
    c.tensors.emplace_back(t.at("name").get<std::string>(), Tensor(shape, std::move(v)));
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint make_checkpoint(const DfcrNet& model, std::uint64_t seed, std::uint64_t step) {
  Checkpoint c;
  c.config = model.config();
  c.seed = seed;
  c.step = step;
  for (const auto& p : model.parameters()) c.tensors.emplace_back(p.name, p.var.value());
  return c;
}

void restore_parameters(const Checkpoint& ckpt, DfcrNet& model) {
  auto params = model.parameters();
  if (params.size() != ckpt.tensors.size()) throw InputError("checkpoint parameter count does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.tensors[i];
    if (name != params[i].name || t.shape() != params[i].var.shape()) {
      throw InputError("checkpoint tensor " + name + " does not match model parameter " + params[i].name);
    }
    params[i].var.mutable_value() = t;
  }
}

}  // namespace dfcr
