#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dfcr/nn.hpp"

namespace dfcr {

struct GradcheckOptions {
  double eps = 1e-6;
  double tolerance = 1e-4;
  /// Entries sampled per tensor; 0 checks every entry.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
  /// Negative control: perturbs the analytic gradient of the first tensor.
  bool corrupt_analytic = false;
};

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  double rel_error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::string module;
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Central differences against reverse-mode gradients.
///
/// `loss` must rebuild the scalar from the current values of `inputs` on every
/// call. Per tensor, the error is ||analytic - numeric|| / max(||analytic||,
/// ||numeric||) over the sampled entries; norms below 1e-9 count as zero.
GradcheckReport gradcheck(const std::string& module, const std::function<ag::Var()>& loss,
                          const nn::ParamList& inputs, const GradcheckOptions& opt = {});

/// Built-in miniature checks: "gcam", "cdlm", "lfem", "dfwfm", "model".
std::vector<std::string> gradcheck_modules();
GradcheckReport run_module_gradcheck(const std::string& module, const GradcheckOptions& opt = {});

/// Largest |dL_C/dx| through the dictionary loss with x as a leaf, under the
/// training (stop-gradient) setting. Exactly 0 when the path is blocked.
double dictionary_loss_x_gradient(std::uint64_t seed);

}  // namespace dfcr
