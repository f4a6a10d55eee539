#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfcr/cdlm.hpp"
#include "dfcr/cnn_branch.hpp"
#include "dfcr/dfwfm.hpp"
#include "dfcr/transformer.hpp"

namespace dfcr {

/// Module switches for the ablation grid. Disabled modules become
/// pass-throughs: identity gates for attention, plain concat for fusion.
struct AblationToggles {
  bool gcam = true;
  bool cdlm_lfem = true;
  bool dfwfm = true;
};

struct ModelConfig {
  BackboneConfig backbone;
  CnnConfig cnn;
  std::size_t gcam_reduction = 16;
  std::size_t feature_dim = 64;  // d
  double lambda = 0.01;
  std::size_t lfem_width = 64;   // C'
  std::size_t fusion_channels = 256;
  std::size_t num_classes = 4;
  double alpha = 1.0;
  AttentionVariant attention = AttentionVariant::CdlmLfem;
  std::size_t se_reduction = 16;
  std::size_t eca_kernel = 0;
  std::size_t cbam_reduction = 16;
  std::size_t cbam_spatial_kernel = 7;
  AblationToggles toggles;
  /// Blocks the dictionary loss gradient through x. Only gradient checks of
  /// the whole model turn this off.
  bool stop_gradient = true;

  bool uses_cdlm() const { return toggles.cdlm_lfem && attention == AttentionVariant::CdlmLfem; }
  void validate() const;
};

/// Miniature network for gradient checks and fast tests: 16×16×9 inputs,
/// four stages of width 4..32, three classes.
ModelConfig tiny_model_config();

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ModelOutput {
  ag::Var logits;             // [B,K]
  ag::Var dictionary_loss;    // scalar batch mean; undefined without CDLM
  std::size_t skipped_dictionary_samples = 0;
  std::vector<double> attention_sums;  // per LFEM layer, per sample
  Tensor coefficients;                 // [B,K] when CDLM is active
};

class DfcrNet {
 public:
  DfcrNet() = default;
  DfcrNet(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  /// image [B,H,W,bands]. Throws NumericError naming the first stage whose
  /// output is not finite.
  ModelOutput forward(const ag::Var& image) const;

  nn::ParamList parameters() const;
  std::size_t parameter_count() const;
  std::size_t parameter_count_excluding(const std::string& group) const;

  TransformerBranch& transformer() { return transformer_; }
  CnnBranch& cnn() { return cnn_; }
  std::optional<Cdlm>& cdlm() { return cdlm_; }

 private:
  ModelConfig cfg_;
  TransformerBranch transformer_;
  std::optional<Cdlm> cdlm_;
  CnnBranch cnn_;
  nn::Linear proj_t_;
  nn::Linear proj_c_;
  DfwfmParams dfwfm_;
  nn::Linear head_;
};

/// Mean softmax cross-entropy; labels must lie in [0, K).
ag::Var cross_entropy(const ag::Var& logits, const std::vector<std::size_t>& labels);

/// CE + alpha * L_C (batch means). alpha must be non-negative.
ag::Var total_loss(const ModelOutput& out, const std::vector<std::size_t>& labels, double alpha);

/// Row-wise argmax; ties go to the lowest class index.
std::vector<std::size_t> predict(const Tensor& logits);

/// Self-describing parameter container.
///
/// Layout: the 5 ASCII bytes "DFCR1", a little-endian u64 header length, a
/// UTF-8 JSON header {format_version, config, seed, step, metadata, tensors:
/// [{name, shape, offset, count}]}, then every tensor as little-endian
/// float64 in header order (offset counts doubles from payload start).
struct Checkpoint {
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a model's parameters (plus config) for saving.
Checkpoint make_checkpoint(const DfcrNet& model, std::uint64_t seed, std::uint64_t step);
/// Copies tensors into a model built from the same config; names and shapes must match.
void restore_parameters(const Checkpoint& ckpt, DfcrNet& model);

}  // namespace dfcr
