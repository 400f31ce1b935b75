#pragma once

// Minimal reverse-mode automatic differentiation over float64 tensors.
//
// Every operation produces a Var holding its value and, when any input
// requires a gradient and recording is enabled, a closure that pushes the
// output gradient back into the inputs. backward() walks the recorded graph
// in reverse topological order.

#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>

#include "tctrack/tensor.hpp"

namespace tctrack::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const {
    if (node_->value.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  /// Gradient after backward(); zeros if none reached this node.
  Tensor grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return Tensor::zeros(node_->value.shape());
  }
  void zero_grad() { node_->grad = Tensor(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  Var detach() const;

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

/// Leaf that accumulates gradients.
inline Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var(std::move(n));
}

inline Var Var::detach() const { return constant(node_->value); }

namespace detail {

inline Var make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (auto& in : inputs) n->parents.push_back(in.node_ptr());
      n->backward = std::move(fn);
    }
  }
  return Var(std::move(n));
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

/// Reverse pass from a scalar root; seeds d(root)/d(root) = 1.
inline void backward(const Var& root) {
  if (root.size() != 1) throw DimensionError("backward() requires a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::require_same(a, b, "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return detail::make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] -= self.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return detail::make(std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += s;
  return detail::make(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {
// Unary op with derivative expressed through input x and output y.
template <class F, class D>
Var unary(const Var& a, F f, D d) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = f(v);
  return make(std::move(out), {a}, [d](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d(p.value[i], self.value[i]);
  });
}
}  // namespace detail

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var exp(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// sqrt with a zero subgradient at 0, so distance-style losses stay exactly 0 at the optimum.
inline Var safe_sqrt(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// log(1 + exp(x)), stable for large |x|.
inline Var softplus(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

inline Var clamp_min(const Var& a, double lo) {
  return detail::unary(
      a, [lo](double x) { return x > lo ? x : lo; }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

inline Var minimum(const Var& a, const Var& b) {
  detail::require_same(a, b, "minimum");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], b.value()[i]);
  return detail::make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      bool take_a = pa.value[i] <= pb.value[i];
      Node& p = take_a ? pa : pb;
      if (p.requires_grad) p.grad_buffer()[i] += self.grad[i];
    }
  });
}

inline Var maximum(const Var& a, const Var& b) {
  detail::require_same(a, b, "maximum");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], b.value()[i]);
  return detail::make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      bool take_a = pa.value[i] >= pb.value[i];
      Node& p = take_a ? pa : pb;
      if (p.requires_grad) p.grad_buffer()[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::make(Tensor({1}, s), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g.data()) v += self.grad[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Weighted sum with a constant weight tensor (masks, targets).
inline Var dot_const(const Var& a, const Tensor& w) {
  if (a.shape() != w.shape())
    throw DimensionError("dot_const shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(w.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  return detail::make(Tensor({1}, s), {a}, [w](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

inline Var add_all(const std::vector<Var>& terms) {
  if (terms.empty()) throw DimensionError("add_all of empty list");
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// ---------------------------------------------------------------- shape ops

inline Var reshape(const Var& a, Shape s) {
  Tensor out = a.value().reshaped(std::move(s));
  return detail::make(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const auto r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
  return detail::make(std::move(out), {a}, [r, c](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) g.at(i, j) += self.grad.at(j, i);
  });
}

/// Concatenate along the leading dimension (channels for feature maps).
inline Var concat0(const Var& a, const Var& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw DimensionError("concat0 trailing dims differ: " + shape_str(sa) + " vs " + shape_str(sb));
  Shape so = sa;
  so[0] += sb[0];
  Tensor out(so);
  std::copy(a.value().data().begin(), a.value().data().end(), out.data().begin());
  std::copy(b.value().data().begin(), b.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  const std::size_t na = a.size();
  return detail::make(std::move(out), {a, b}, [na](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

/// Rows [begin, end) of the leading dimension.
inline Var slice0(const Var& a, std::int64_t begin, std::int64_t end) {
  if (begin < 0 || end > a.dim(0) || begin >= end)
    throw DimensionError("slice0 [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(a.shape()));
  Shape so = a.shape();
  so[0] = end - begin;
  const std::size_t inner = static_cast<std::size_t>(numel(a.shape()) / a.dim(0));
  const std::size_t off = static_cast<std::size_t>(begin) * inner;
  Tensor out(so);
  std::copy_n(a.value().data().begin() + static_cast<std::ptrdiff_t>(off), out.size(), out.data().begin());
  return detail::make(std::move(out), {a}, [off](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

/// Column slice [begin, end) of a rank-2 tensor.
inline Var slice_cols(const Var& a, std::int64_t begin, std::int64_t end) {
  if (a.value().rank() != 2 || begin < 0 || end > a.dim(1) || begin >= end)
    throw DimensionError("slice_cols out of range for " + shape_str(a.shape()));
  const auto r = a.dim(0), w = end - begin;
  Tensor out({r, w});
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < w; ++j) out.at(i, j) = a.value().at(i, begin + j);
  return detail::make(std::move(out), {a}, [r, w, begin](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < w; ++j) g.at(i, begin + j) += self.grad.at(i, j);
  });
}

/// Horizontal concatenation of rank-2 blocks with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of empty list");
  const auto r = parts[0].dim(0);
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.dim(0) != r) throw DimensionError("concat_cols row mismatch");
    total += p.dim(1);
  }
  Tensor out({r, total});
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < p.dim(1); ++j) out.at(i, off + j) = p.value().at(i, j);
    off += p.dim(1);
  }
  return detail::make(std::move(out), parts, [offsets, r](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      const auto w = p.value.dim(1);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < w; ++j) g.at(i, j) += self.grad.at(i, offsets[k] + j);
    }
  });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const double* A = a.value().ptr();
  const double* B = b.value().ptr();
  double* C = out.ptr();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return detail::make(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* G = self.grad.ptr();
    if (pa.requires_grad) {
      double* GA = pa.grad_buffer().ptr();
      const double* B = pb.value.ptr();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::int64_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          GA[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      double* GB = pb.grad_buffer().ptr();
      const double* A = pa.value.ptr();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          for (std::int64_t j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

/// x (L x C) + b (C) broadcast over rows.
inline Var add_rowvec(const Var& x, const Var& b) {
  if (x.value().rank() != 2 || b.size() != static_cast<std::size_t>(x.dim(1)))
    throw DimensionError("add_rowvec " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const auto r = x.dim(0), c = x.dim(1);
  Tensor out = x.value();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) += b.value()[static_cast<std::size_t>(j)];
  return detail::make(std::move(out), {x, b}, [r, c](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) g[static_cast<std::size_t>(j)] += self.grad.at(i, j);
    }
  });
}

/// Multiplies each slice along the leading dimension by the matching entry of s.
inline Var scale_dim0(const Var& x, const Var& s) {
  if (s.size() != static_cast<std::size_t>(x.dim(0)))
    throw DimensionError("scale_dim0 " + shape_str(x.shape()) + " by " + shape_str(s.shape()));
  const std::size_t n0 = static_cast<std::size_t>(x.dim(0));
  const std::size_t inner = x.size() / n0;
  Tensor out = x.value();
  for (std::size_t c = 0; c < n0; ++c)
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] *= s.value()[c];
  return detail::make(std::move(out), {x, s}, [n0, inner](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t c = 0; c < n0; ++c)
        for (std::size_t i = 0; i < inner; ++i) g[c * inner + i] += self.grad[c * inner + i] * ps.value[c];
    }
    if (ps.requires_grad) {
      auto& g = ps.grad_buffer();
      for (std::size_t c = 0; c < n0; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < inner; ++i) acc += self.grad[c * inner + i] * px.value[c * inner + i];
        g[c] += acc;
      }
    }
  });
}

/// Adds b[c] to every element of slice c along the leading dimension.
inline Var add_dim0(const Var& x, const Var& b) {
  if (b.size() != static_cast<std::size_t>(x.dim(0)))
    throw DimensionError("add_dim0 " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t n0 = static_cast<std::size_t>(x.dim(0));
  const std::size_t inner = x.size() / n0;
  Tensor out = x.value();
  for (std::size_t c = 0; c < n0; ++c)
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] += b.value()[c];
  return detail::make(std::move(out), {x, b}, [n0, inner](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t c = 0; c < n0; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < inner; ++i) acc += self.grad[c * inner + i];
        g[c] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------- normalization

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(const Var& x) {
  if (x.value().rank() != 2) throw DimensionError("softmax_rows expects rank 2");
  const auto r = x.dim(0), c = x.dim(1);
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < r; ++i) {
    double mx = x.value().at(i, 0);
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, x.value().at(i, j));
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += (out.at(i, j) = std::exp(x.value().at(i, j) - mx));
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) /= z;
  }
  return detail::make(std::move(out), {x}, [r, c](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::int64_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < c; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
      for (std::int64_t j = 0; j < c; ++j) g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
    }
  });
}

/// log-softmax across the leading dimension, independently for every trailing position.
inline Var log_softmax_dim0(const Var& x) {
  const std::size_t k = static_cast<std::size_t>(x.dim(0));
  const std::size_t inner = x.size() / k;
  Tensor out(x.shape());
  for (std::size_t p = 0; p < inner; ++p) {
    double mx = x.value()[p];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, x.value()[c * inner + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(x.value()[c * inner + p] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < k; ++c) out[c * inner + p] = x.value()[c * inner + p] - lse;
  }
  return detail::make(std::move(out), {x}, [k, inner](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < inner; ++p) {
      double gs = 0.0;
      for (std::size_t c = 0; c < k; ++c) gs += self.grad[c * inner + p];
      for (std::size_t c = 0; c < k; ++c)
        g[c * inner + p] += self.grad[c * inner + p] - std::exp(self.value[c * inner + p]) * gs;
    }
  });
}

/// Per-row layer normalization with affine gamma/beta over the channel axis.
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  if (x.value().rank() != 2) throw DimensionError("layer_norm_rows expects rank 2");
  const auto r = x.dim(0), c = x.dim(1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c))
    throw DimensionError("layer_norm_rows affine size mismatch");
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mu += x.value().at(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double d = x.value().at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (std::int64_t j = 0; j < c; ++j) {
      xhat.at(i, j) = (x.value().at(i, j) - mu) * is;
      out.at(i, j) = xhat.at(i, j) * gamma.value()[static_cast<std::size_t>(j)] +
                     beta.value()[static_cast<std::size_t>(j)];
    }
  }
  return detail::make(std::move(out), {x, gamma, beta}, [r, c, xhat, inv_std](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const double cn = static_cast<double>(c);
    if (pg.requires_grad || pb.requires_grad) {
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
          if (pg.requires_grad) pg.grad_buffer()[static_cast<std::size_t>(j)] += self.grad.at(i, j) * xhat.at(i, j);
          if (pb.requires_grad) pb.grad_buffer()[static_cast<std::size_t>(j)] += self.grad.at(i, j);
        }
    }
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::int64_t i = 0; i < r; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
          const double gh = self.grad.at(i, j) * pg.value[static_cast<std::size_t>(j)];
          s1 += gh;
          s2 += gh * xhat.at(i, j);
        }
        const double is = inv_std[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < c; ++j) {
          const double gh = self.grad.at(i, j) * pg.value[static_cast<std::size_t>(j)];
          g.at(i, j) += is / cn * (cn * gh - s1 - xhat.at(i, j) * s2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- spatial ops

/// 2-D convolution (cross-correlation) of x (Cin,H,W) with w (Cout,Cin,k,k).
/// bias may be undefined.
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride = 1, int pad = 0) {
  if (x.value().rank() != 3 || w.value().rank() != 4)
    throw DimensionError("conv2d expects x rank 3 and w rank 4, got " + shape_str(x.shape()) + ", " +
                         shape_str(w.shape()));
  const auto cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const auto cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin)
    throw DimensionError("conv2d channel mismatch: input " + std::to_string(cin) + ", weight " +
                         std::to_string(w.dim(1)));
  if (bias.defined() && bias.size() != static_cast<std::size_t>(cout))
    throw DimensionError("conv2d bias size mismatch");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d stride must be >= 1 and pad >= 0");
  const auto oh = (h + 2 * pad - kh) / stride + 1;
  const auto ow = (wd + 2 * pad - kw) / stride + 1;
  if (h + 2 * pad < kh || wd + 2 * pad < kw || oh < 1 || ow < 1)
    throw DimensionError("conv2d input " + shape_str(x.shape()) + " smaller than kernel " + shape_str(w.shape()));

  Tensor out({cout, oh, ow});
  const double* X = x.value().ptr();
  const double* Wt = w.value().ptr();
  double* O = out.ptr();
  for (std::int64_t co = 0; co < cout; ++co) {
    double* oc = O + co * oh * ow;
    if (bias.defined()) std::fill(oc, oc + oh * ow, bias.value()[static_cast<std::size_t>(co)]);
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const double* xc = X + ci * h * wd;
      for (std::int64_t ky = 0; ky < kh; ++ky)
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          const double wv = Wt[((co * cin + ci) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const double* xr = xc + iy * wd;
            double* orow = oc + oy * ow;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const std::int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              orow[ox] += wv * xr[ix];
            }
          }
        }
    }
  }
  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make(std::move(out), std::move(inputs),
                      [cin, h, wd, cout, kh, kw, oh, ow, stride, pad](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const double* G = self.grad.ptr();
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::int64_t co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < oh * ow; ++i) acc += G[co * oh * ow + i];
        gb[static_cast<std::size_t>(co)] += acc;
      }
    }
    double* GX = px.requires_grad ? px.grad_buffer().ptr() : nullptr;
    double* GW = pw.requires_grad ? pw.grad_buffer().ptr() : nullptr;
    const double* X = px.value.ptr();
    const double* Wt = pw.value.ptr();
    for (std::int64_t co = 0; co < cout; ++co) {
      const double* gc = G + co * oh * ow;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const double* xc = X + ci * h * wd;
        double* gxc = GX ? GX + ci * h * wd : nullptr;
        for (std::int64_t ky = 0; ky < kh; ++ky)
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
            const double wv = Wt[widx];
            double gw = 0.0;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
              const std::int64_t iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t ox = 0; ox < ow; ++ox) {
                const std::int64_t ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                const double gv = gc[oy * ow + ox];
                gw += gv * xc[iy * wd + ix];
                if (gxc) gxc[iy * wd + ix] += gv * wv;
              }
            }
            if (GW) GW[widx] += gw;
          }
      }
    }
  });
}

/// Max pooling with square window; no padding.
inline Var max_pool2d(const Var& x, int k, int stride) {
  if (x.value().rank() != 3) throw DimensionError("max_pool2d expects rank 3");
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < k || w < k) throw DimensionError("max_pool2d input " + shape_str(x.shape()) + " smaller than window");
  const auto oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor out({c, oh, ow});
  std::vector<std::size_t> arg(out.size());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t bi = 0;
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx) {
            const auto idx = static_cast<std::size_t>((ch * h + oy * stride + dy) * w + ox * stride + dx);
            if (x.value()[idx] > best) {
              best = x.value()[idx];
              bi = idx;
            }
          }
        const auto o = static_cast<std::size_t>((ch * oh + oy) * ow + ox);
        out[o] = best;
        arg[o] = bi;
      }
  return detail::make(std::move(out), {x}, [arg](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

/// Adaptive max pooling to (size x size); bins follow floor/ceil boundaries.
inline Var adaptive_max_pool2d(const Var& x, std::int64_t size) {
  if (x.value().rank() != 3) throw DimensionError("adaptive_max_pool2d expects rank 3");
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (size < 1 || h < size || w < size)
    throw ConfigError("adaptive_max_pool2d: input " + shape_str(x.shape()) + " smaller than target " +
                      std::to_string(size));
  Tensor out({c, size, size});
  std::vector<std::size_t> arg(out.size());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t oy = 0; oy < size; ++oy) {
      const auto y0 = (oy * h) / size, y1 = ((oy + 1) * h + size - 1) / size;
      for (std::int64_t ox = 0; ox < size; ++ox) {
        const auto x0 = (ox * w) / size, x1 = ((ox + 1) * w + size - 1) / size;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t bi = 0;
        for (auto yy = y0; yy < y1; ++yy)
          for (auto xx = x0; xx < x1; ++xx) {
            const auto idx = static_cast<std::size_t>((ch * h + yy) * w + xx);
            if (x.value()[idx] > best) {
              best = x.value()[idx];
              bi = idx;
            }
          }
        const auto o = static_cast<std::size_t>((ch * size + oy) * size + ox);
        out[o] = best;
        arg[o] = bi;
      }
    }
  return detail::make(std::move(out), {x}, [arg](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

/// Mean over all trailing positions of each leading slice: (C,H,W) -> (C).
inline Var global_avg_pool(const Var& x) {
  const std::size_t c = static_cast<std::size_t>(x.dim(0));
  const std::size_t inner = x.size() / c;
  Tensor out({static_cast<std::int64_t>(c)});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += x.value()[ch * inner + i];
    out[ch] = s / static_cast<double>(inner);
  }
  return detail::make(std::move(out), {x}, [c, inner](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) g[ch * inner + i] += self.grad[ch] / static_cast<double>(inner);
  });
}

/// Per-channel valid cross-correlation of kernel z (C,hz,wz) over x (C,Hx,Wx).
inline Var depthwise_xcorr(const Var& z, const Var& x) {
  if (z.value().rank() != 3 || x.value().rank() != 3) throw DimensionError("depthwise_xcorr expects rank 3");
  const auto c = z.dim(0), hz = z.dim(1), wz = z.dim(2);
  const auto hx = x.dim(1), wx = x.dim(2);
  if (x.dim(0) != c)
    throw DimensionError("depthwise_xcorr channel mismatch " + shape_str(z.shape()) + " vs " + shape_str(x.shape()));
  if (hz > hx || wz > wx)
    throw DimensionError("depthwise_xcorr template " + shape_str(z.shape()) + " larger than search " +
                         shape_str(x.shape()));
  const auto oh = hx - hz + 1, ow = wx - wz + 1;
  Tensor out({c, oh, ow});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::int64_t dy = 0; dy < hz; ++dy)
          for (std::int64_t dx = 0; dx < wz; ++dx) s += z.value().at(ch, dy, dx) * x.value().at(ch, oy + dy, ox + dx);
        out.at(ch, oy, ox) = s;
      }
  return detail::make(std::move(out), {z, x}, [c, hz, wz, oh, ow](Node& self) {
    Node& pz = *self.parents[0];
    Node& px = *self.parents[1];
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const double gv = self.grad.at(ch, oy, ox);
          if (gv == 0.0) continue;
          for (std::int64_t dy = 0; dy < hz; ++dy)
            for (std::int64_t dx = 0; dx < wz; ++dx) {
              if (pz.requires_grad) pz.grad_buffer().at(ch, dy, dx) += gv * px.value.at(ch, oy + dy, ox + dx);
              if (px.requires_grad) px.grad_buffer().at(ch, oy + dy, ox + dx) += gv * pz.value.at(ch, dy, dx);
            }
        }
  });
}

/// (C,H,W) feature map -> (H*W, C) token sequence, channels last.
inline Var tokens_from_map(const Var& m) {
  if (m.value().rank() != 3) throw DimensionError("tokens_from_map expects rank 3");
  return transpose(reshape(m, {m.dim(0), m.dim(1) * m.dim(2)}));
}

/// Inverse of tokens_from_map.
inline Var map_from_tokens(const Var& t, std::int64_t h, std::int64_t w) {
  if (t.value().rank() != 2 || t.dim(0) != h * w)
    throw DimensionError("map_from_tokens: " + shape_str(t.shape()) + " is not " + std::to_string(h * w) + " tokens");
  return reshape(transpose(t), {t.dim(1), h, w});
}

}  // namespace tctrack::ad
