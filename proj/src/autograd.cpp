#include "dfcr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "dfcr/kernels.hpp"

namespace dfcr::ag {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.size() != src.size()) {
    throw ShapeError("gradient shape " + shape_str(src.shape()) + " does not match " +
                     shape_str(dst.shape()));
  }
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Odometer over `out`, tracking one offset per input stride vector.
template <typename F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
  bool same = false;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  const auto st = strides_of(in);
  std::vector<std::size_t> res(r, 0);
  for (std::size_t d = off; d < r; ++d) {
    const std::size_t k = d - off;
    res[d] = (in[k] == 1 && out[d] != 1) ? 0 : st[k];
  }
  return res;
}

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  bc.out.assign(r, 1);
  for (std::size_t d = 0; d < r; ++d) {
    const std::size_t da = d + a.size() >= r ? a[d + a.size() - r] : 1;
    const std::size_t db = d + b.size() >= r ? b[d + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[d] = std::max(da, db);
  }
  bc.sa = aligned_strides(a, bc.out);
  bc.sb = aligned_strides(b, bc.out);
  return bc;
}

// Generic binary op. fwd(x, y) -> z; da(x, y, z) and db(x, y, z) are local
// partial derivatives.
template <typename Fwd, typename Da, typename Db>
Var binary(const Var& a, const Var& b, Fwd fwd, Da da, Db db) {
  auto bc = make_broadcast(a.shape(), b.shape());
  Tensor out(bc.out);
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.data();
  if (bc.same) {
    for (std::size_t i = 0; i < out.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  } else {
    broadcast_loop(bc.out, bc.sa, bc.sb,
                   [&](std::size_t i, std::size_t ia, std::size_t ib) { ov[i] = fwd(av[ia], bv[ib]); });
  }
  NodePtr na = a.node();
  NodePtr nb = b.node();
  return make_result(std::move(out), {a, b},
                     [na, nb, bc, da, db](const Tensor& g, const Tensor& z) {
                       const double* x = na->value.data();
                       const double* y = nb->value.data();
                       const double* gv = g.data();
                       const double* zv = z.data();
                       double* ga = na->requires_grad ? na->grad_buffer().data() : nullptr;
                       double* gb = nb->requires_grad ? nb->grad_buffer().data() : nullptr;
                       auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         if (ga) ga[ia] += gv[i] * da(x[ia], y[ib], zv[i]);
                         if (gb) gb[ib] += gv[i] * db(x[ia], y[ib], zv[i]);
                       };
                       if (bc.same) {
                         for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
                       } else {
                         broadcast_loop(bc.out, bc.sa, bc.sb, step);
                       }
                     });
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const double* av = a.value().data();
  double* ov = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) ov[i] = fwd(av[i]);
  NodePtr na = a.node();
  return make_result(std::move(out), {a}, [na, deriv](const Tensor& g, const Tensor& z) {
    const double* x = na->value.data();
    double* ga = na->grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], z[i]);
  });
}

struct AxisView {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape r = s;
  if (keepdim) {
    r[axis] = 1;
  } else {
    r.erase(r.begin() + static_cast<long>(axis));
  }
  return r;
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_) return {};
  if (node_->grad.shape() != node_->value.shape()) return Tensor(node_->value.shape());
  return node_->grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_result(Tensor value, const std::vector<Var>& inputs,
                std::function<void(const Tensor&, const Tensor&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) node->parents.push_back(in.node());
    }
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void accumulate(const Var& v, const Tensor& g) {
  if (v.requires_grad()) add_into(v.node()->grad_buffer(), g);
}

void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward() without seed needs a scalar root");
  backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  add_into(root.node()->grad_buffer(), seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    if (n->grad.shape() == n->value.shape()) n->backward(n->grad, n->value);
    n->grad = Tensor();
  }
}

Var constant(Tensor t) { return Var(std::move(t), false); }

Var detach(const Var& v) { return Var(v.value(), false); }

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double z) { return z * (1.0 - z); });
}

Var gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Var sqrt(const Var& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double z) { return 0.5 / z; });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  NodePtr na = a.node();
  return make_result(Tensor::scalar(s), {a}, [na](const Tensor& g, const Tensor&) {
    auto& ga = na->grad_buffer();
    for (auto& v : ga.storage()) v += g[0];
  });
}

Var mean_all(const Var& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum_axis(const Var& a, std::size_t axis, bool keepdim) {
  const auto v = axis_view(a.shape(), axis);
  Tensor out(reduced_shape(a.shape(), axis, keepdim));
  const double* x = a.value().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.n; ++k) {
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += x[(o * v.n + k) * v.inner + i];
    }
  }
  NodePtr na = a.node();
  return make_result(std::move(out), {a}, [na, v](const Tensor& g, const Tensor&) {
    double* ga = na->grad_buffer().data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t k = 0; k < v.n; ++k) {
        for (std::size_t i = 0; i < v.inner; ++i) ga[(o * v.n + k) * v.inner + i] += g[o * v.inner + i];
      }
    }
  });
}

Var mean_axis(const Var& a, std::size_t axis, bool keepdim) {
  return mul_scalar(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(a.dim(axis)));
}

Var max_axis(const Var& a, std::size_t axis, bool keepdim) {
  const auto v = axis_view(a.shape(), axis);
  if (v.n == 0) throw ShapeError("max over an empty axis");
  Tensor out(reduced_shape(a.shape(), axis, keepdim));
  std::vector<std::size_t> arg(out.size());
  const double* x = a.value().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * v.n * v.inner + i];
      for (std::size_t k = 1; k < v.n; ++k) {
        const double c = x[(o * v.n + k) * v.inner + i];
        if (c > bv) {
          bv = c;
          best = k;
        }
      }
      out[o * v.inner + i] = bv;
      arg[o * v.inner + i] = (o * v.n + best) * v.inner + i;
    }
  }
  NodePtr na = a.node();
  return make_result(std::move(out), {a}, [na, arg = std::move(arg)](const Tensor& g, const Tensor&) {
    double* ga = na->grad_buffer().data();
    for (std::size_t j = 0; j < arg.size(); ++j) ga[arg[j]] += g[j];
  });
}

Var softmax_last(const Var& a) {
  const std::size_t n = a.shape().empty() ? 1 : a.shape().back();
  const std::size_t rows = n ? a.value().size() / n : 0;
  Tensor out(a.shape());
  const double* x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    double* yr = out.data() + r * n;
    const double m = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - m);
      s += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  NodePtr na = a.node();
  return make_result(std::move(out), {a}, [na, n, rows](const Tensor& g, const Tensor& y) {
    double* ga = na->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  NodePtr na = a.node();
  return make_result(std::move(out), {a}, [na](const Tensor& g, const Tensor&) {
    double* ga = na->grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var permute(const Var& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) throw ShapeError("permutation rank mismatch for " + shape_str(in));
  const auto st = strides_of(in);
  Shape out_shape(in.size());
  std::vector<std::size_t> src(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out_shape[i] = in.at(perm[i]);
    src[i] = st[perm[i]];
  }
  Tensor out(out_shape);
  const double* x = a.value().data();
  std::vector<std::size_t> zero(in.size(), 0);
  broadcast_loop(out_shape, src, zero,
                 [&](std::size_t i, std::size_t ia, std::size_t) { out[i] = x[ia]; });
  NodePtr na = a.node();
  return make_result(std::move(out), {a},
                     [na, out_shape, src, zero](const Tensor& g, const Tensor&) {
                       double* ga = na->grad_buffer().data();
                       broadcast_loop(out_shape, src, zero,
                                      [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
                     });
}

Var transpose2d(const Var& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d expects a matrix, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != out_shape[d]) {
        throw ShapeError("concat shape mismatch: " + shape_str(s) + " vs " + shape_str(out_shape));
      }
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto ov = axis_view(out_shape, axis);
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t n = p.dim(axis);
    const double* x = p.value().data();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy(x + o * n * ov.inner, x + (o + 1) * n * ov.inner,
                out.data() + (o * ov.n + off) * ov.inner);
    }
    off += n;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result(std::move(out), parts,
                     [nodes, offsets, ov, axis](const Tensor& g, const Tensor&) {
                       for (std::size_t k = 0; k < nodes.size(); ++k) {
                         if (!nodes[k]->requires_grad) continue;
                         const std::size_t n = nodes[k]->value.dim(axis);
                         double* ga = nodes[k]->grad_buffer().data();
                         for (std::size_t o = 0; o < ov.outer; ++o) {
                           const double* src = g.data() + (o * ov.n + offsets[k]) * ov.inner;
                           double* dst = ga + o * n * ov.inner;
                           for (std::size_t i = 0; i < n * ov.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto v = axis_view(a.shape(), axis);
  if (begin > end || end > v.n) throw ShapeError("slice bounds out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t n = end - begin;
  Tensor out(out_shape);
  const double* x = a.value().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy(x + (o * v.n + begin) * v.inner, x + (o * v.n + end) * v.inner,
              out.data() + o * n * v.inner);
  }
  NodePtr na = a.node();
  return make_result(std::move(out), {a}, [na, v, begin, n](const Tensor& g, const Tensor&) {
    double* ga = na->grad_buffer().data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      double* dst = ga + (o * v.n + begin) * v.inner;
      const double* src = g.data() + o * n * v.inner;
      for (std::size_t i = 0; i < n * v.inner; ++i) dst[i] += src[i];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  if (b.rank() != 2) throw ShapeError("matmul rhs must be a matrix, got " + shape_str(b.shape()));
  if (a.rank() < 1 || a.shape().back() != b.dim(0)) {
    throw ShapeError("matmul mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t rows = a.value().size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  kernels::gemm(false, false, rows, n, k, a.value().data(), b.value().data(), out.data(), false);
  NodePtr na = a.node();
  NodePtr nb = b.node();
  return make_result(std::move(out), {a, b}, [na, nb, rows, n, k](const Tensor& g, const Tensor&) {
    if (na->requires_grad) {
      kernels::gemm(false, true, rows, k, n, g.data(), nb->value.data(), na->grad_buffer().data(), true);
    }
    if (nb->requires_grad) {
      kernels::gemm(true, false, k, n, rows, na->value.data(), g.data(), nb->grad_buffer().data(), true);
    }
  });
}

Var bmm(const Var& a, const Var& b, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm expects matching [G,*,*] operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t groups = a.dim(0);
  const std::size_t m = a.dim(1);
  const std::size_t k = a.dim(2);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  if ((trans_b ? b.dim(2) : b.dim(1)) != k) {
    throw ShapeError("bmm inner mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{groups, m, n});
  kernels::gemm_batched(groups, false, trans_b, m, n, k, a.value().data(), b.value().data(), out.data(),
                        false);
  NodePtr na = a.node();
  NodePtr nb = b.node();
  return make_result(std::move(out), {a, b},
                     [na, nb, groups, m, n, k, trans_b](const Tensor& g, const Tensor&) {
                       if (na->requires_grad) {
                         kernels::gemm_batched(groups, false, !trans_b, m, k, n, g.data(), nb->value.data(),
                                               na->grad_buffer().data(), true);
                       }
                       if (nb->requires_grad) {
                         if (trans_b) {
                           kernels::gemm_batched(groups, true, false, n, k, m, g.data(), na->value.data(),
                                                 nb->grad_buffer().data(), true);
                         } else {
                           kernels::gemm_batched(groups, true, false, k, n, m, na->value.data(), g.data(),
                                                 nb->grad_buffer().data(), true);
                         }
                       }
                     });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t c = x.shape().back();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("layer_norm affine size does not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.value().size() / c;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  const double* xv = x.value().data();
  const double* gv = gamma.value().data();
  const double* bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mu) * inv_std[r];
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  NodePtr nx = x.node();
  NodePtr ng = gamma.node();
  NodePtr nbeta = beta.node();
  return make_result(
      std::move(out), {x, gamma, beta},
      [nx, ng, nbeta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](const Tensor& g,
                                                                                  const Tensor&) {
        const double* gam = ng->value.data();
        double* gx = nx->requires_grad ? nx->grad_buffer().data() : nullptr;
        double* gg = ng->requires_grad ? ng->grad_buffer().data() : nullptr;
        double* gb = nbeta->requires_grad ? nbeta->grad_buffer().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * c;
          const double* hr = xhat.data() + r * c;
          double mean_d = 0.0;
          double mean_dh = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = gr[j] * gam[j];
            mean_d += d;
            mean_dh += d * hr[j];
            if (gg) gg[j] += gr[j] * hr[j];
            if (gb) gb[j] += gr[j];
          }
          mean_d /= static_cast<double>(c);
          mean_dh /= static_cast<double>(c);
          if (gx) {
            for (std::size_t j = 0; j < c; ++j) {
              gx[r * c + j] += inv_std[r] * (gr[j] * gam[j] - mean_d - hr[j] * mean_dh);
            }
          }
        }
      });
}

namespace {

kernels::ConvGeometry conv_geometry(const Shape& x, std::size_t kh, std::size_t kw, std::size_t cout,
                                    std::size_t stride, std::size_t pad) {
  if (x.size() != 4) throw ShapeError("convolution expects NHWC input, got " + shape_str(x));
  if (stride == 0) throw ConfigError("convolution stride must be positive");
  kernels::ConvGeometry g;
  g.batch = x[0];
  g.height = x[1];
  g.width = x[2];
  g.in_channels = x[3];
  g.out_channels = cout;
  g.kernel_h = kh;
  g.kernel_w = kw;
  g.stride = stride;
  g.pad = pad;
  if (g.height + 2 * pad < kh || g.width + 2 * pad < kw) {
    throw ShapeError("kernel larger than padded input " + shape_str(x));
  }
  return g;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad) {
  if (w.rank() != 4 || x.rank() != 4 || w.dim(2) != x.dim(3)) {
    throw ShapeError("conv2d weight " + shape_str(w.shape()) + " does not fit input " + shape_str(x.shape()));
  }
  const auto g = conv_geometry(x.shape(), w.dim(0), w.dim(1), w.dim(3), stride, pad);
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().size() != g.out_channels) throw ShapeError("conv2d bias size mismatch");
  Tensor out(Shape{g.batch, g.out_height(), g.out_width(), g.out_channels});
  kernels::conv2d_forward(g, x.value().data(), w.value().data(),
                          has_bias ? bias.value().data() : nullptr, out.data());
  NodePtr nx = x.node();
  NodePtr nw = w.node();
  NodePtr nb = has_bias ? bias.node() : nullptr;
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [nx, nw, nb, g](const Tensor& gy, const Tensor&) {
    kernels::conv2d_backward(g, nx->value.data(), nw->value.data(), gy.data(),
                             nx->requires_grad ? nx->grad_buffer().data() : nullptr,
                             nw->requires_grad ? nw->grad_buffer().data() : nullptr,
                             (nb && nb->requires_grad) ? nb->grad_buffer().data() : nullptr);
  });
}

Var depthwise_conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad) {
  if (w.rank() != 3 || x.rank() != 4 || w.dim(2) != x.dim(3)) {
    throw ShapeError("depthwise weight " + shape_str(w.shape()) + " does not fit input " +
                     shape_str(x.shape()));
  }
  const auto g = conv_geometry(x.shape(), w.dim(0), w.dim(1), x.dim(3), stride, pad);
  const bool has_bias = bias.defined();
  Tensor out(Shape{g.batch, g.out_height(), g.out_width(), g.out_channels});
  kernels::depthwise_forward(g, x.value().data(), w.value().data(),
                             has_bias ? bias.value().data() : nullptr, out.data());
  NodePtr nx = x.node();
  NodePtr nw = w.node();
  NodePtr nb = has_bias ? bias.node() : nullptr;
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [nx, nw, nb, g](const Tensor& gy, const Tensor&) {
    kernels::depthwise_backward(g, nx->value.data(), nw->value.data(), gy.data(),
                                nx->requires_grad ? nx->grad_buffer().data() : nullptr,
                                nw->requires_grad ? nw->grad_buffer().data() : nullptr,
                                (nb && nb->requires_grad) ? nb->grad_buffer().data() : nullptr);
  });
}

Var avg_pool2d(const Var& x, std::size_t k) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d expects NHWC, got " + shape_str(x.shape()));
  if (k == 0 || x.dim(1) % k || x.dim(2) % k) {
    throw ShapeError("avg_pool2d window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  }
  if (k == 1) return x;
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  const double scale = 1.0 / static_cast<double>(k * k);
  Tensor out(Shape{b, oh, ow, c});
  const double* xv = x.value().data();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const double* src = xv + ((n * h + y) * w + xx) * c;
        double* dst = out.data() + ((n * oh + y / k) * ow + xx / k) * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * scale;
      }
    }
  }
  NodePtr nx = x.node();
  return make_result(std::move(out), {x}, [nx, b, h, w, c, k, oh, ow, scale](const Tensor& g, const Tensor&) {
    double* gx = nx->grad_buffer().data();
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          double* dst = gx + ((n * h + y) * w + xx) * c;
          const double* src = g.data() + ((n * oh + y / k) * ow + xx / k) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * scale;
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  if (x.rank() != 4) throw ShapeError("global pooling expects NHWC, got " + shape_str(x.shape()));
  return mean_axis(reshape(x, {x.dim(0), x.dim(1) * x.dim(2), x.dim(3)}), 1);
}

Var global_max_pool(const Var& x) {
  if (x.rank() != 4) throw ShapeError("global pooling expects NHWC, got " + shape_str(x.shape()));
  return max_axis(reshape(x, {x.dim(0), x.dim(1) * x.dim(2), x.dim(3)}), 1);
}

}  // namespace dfcr::ag
