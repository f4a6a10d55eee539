#pragma once

#include "dfcr/nn.hpp"

namespace dfcr {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adaptive-moment optimizer over a fixed parameter list.
class Adam {
 public:
  Adam(nn::ParamList params, AdamOptions opts);

  void zero_grad();
  /// Applies one update from the accumulated gradients.
  void step();

  std::size_t steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }

 private:
  nn::ParamList params_;
  AdamOptions opts_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

}  // namespace dfcr
