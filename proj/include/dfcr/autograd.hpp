#pragma once

// Minimal reverse-mode automatic differentiation over dfcr::Tensor.
//
// A Var is a handle to a graph node. Operations record a backward closure on
// their result whenever any input requires a gradient and recording is not
// suspended by a NoGradGuard. backward() walks the graph in reverse
// topological order, accumulating into Node::grad.

#include <functional>
#include <memory>
#include <vector>

#include "dfcr/tensor.hpp"

namespace dfcr::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  /// Receives the output gradient and the output value.
  std::function<void(const Tensor&, const Tensor&)> backward;

  /// Gradient storage, zero-initialized on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; zeros of the value's shape when nothing arrived.
  Tensor grad() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Suspends graph recording for its lifetime (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Creates an op result. `fn` is only stored when some input requires grad.
Var make_result(Tensor value, const std::vector<Var>& inputs,
                std::function<void(const Tensor&, const Tensor&)> fn);

/// Adds g into v's gradient when v participates in differentiation.
void accumulate(const Var& v, const Tensor& g);

/// Backpropagates from a scalar root (seed 1) or with an explicit seed.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

Var constant(Tensor t);
Var detach(const Var& v);

// Elementwise, numpy-style broadcasting over right-aligned axes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);
Var sqrt(const Var& a);

Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_axis(const Var& a, std::size_t axis, bool keepdim = false);
Var mean_axis(const Var& a, std::size_t axis, bool keepdim = false);
/// Gradient routes to the first maximal element.
Var max_axis(const Var& a, std::size_t axis, bool keepdim = false);
Var softmax_last(const Var& a);

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& perm);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var transpose2d(const Var& a);

/// a[..., K] · b[K, N] -> [..., N].
Var matmul(const Var& a, const Var& b);
/// Batched: a[G,M,K] · b[G,K,N], or b[G,N,K] transposed when trans_b.
Var bmm(const Var& a, const Var& b, bool trans_b = false);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// NHWC convolution, w is [kh,kw,Cin,Cout]; bias may be undefined.
Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad);
/// Depthwise NHWC convolution, w is [kh,kw,C].
Var depthwise_conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride,
                     std::size_t pad);
/// Non-overlapping k×k average pooling of [B,H,W,C]; H and W divisible by k.
Var avg_pool2d(const Var& x, std::size_t k);

/// [B,H,W,C] -> [B,C].
Var global_avg_pool(const Var& x);
Var global_max_pool(const Var& x);

}  // namespace dfcr::ag
