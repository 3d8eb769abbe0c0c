#pragma once

// Minimal reverse-mode automatic differentiation over dense rank-0/1/2 tensors.
//
// A Tensor is a shared handle onto a graph node. Operations on tensors that
// require gradients record a backward closure on the result; `backward()` walks
// the recorded graph in reverse topological order, accumulates into the grad
// buffers of the leaves, and then releases the graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cgil/errors.hpp"

namespace cgil {

using Real = double;
using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // leaves: present iff requires_grad; interior: transient
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Grad buffer of an input during backward; empty span when the input is frozen.
  std::span<Real> grad_span() {
    if (!requires_grad) return {};
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (shape.size() > 2) throw ShapeError("tensors are rank 0, 1 or 2, got " + shape_str(shape));
    for (auto d : shape)
      if (d == 0) throw ShapeError("zero dimension in " + shape_str(shape));
    if (values.size() != shape_numel(shape))
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match " +
                       shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->data.size(), 0.0);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, 0.0), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  static Tensor vector(std::vector<Real> v, bool requires_grad = false) {
    Shape s{v.size()};
    return from(std::move(s), std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<Real> v,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const {
    if (rank() == 0) return 1;
    return rank() == 2 ? node_->shape[1] : node_->shape[0];
  }

  std::span<const Real> data() const { return node_->data; }
  Real operator[](std::size_t i) const { return node_->data[i]; }
  Real at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  Real item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->data[0];
  }

  // Writable view of a leaf's values (optimizers, finite-difference probes).
  std::span<Real> mutable_data() {
    if (!node_->leaf) throw StateError("mutable_data() on a recorded intermediate");
    return node_->data;
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return node_->requires_grad && node_->grad.size() == numel(); }
  std::span<const Real> grad() const {
    if (!has_grad()) return {};
    return node_->grad;
  }
  std::span<Real> mutable_grad() {
    if (!has_grad()) return {};
    return node_->grad;
  }

  void set_requires_grad(bool on) {
    if (!node_->leaf) throw StateError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
    if (on) {
      if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), 0.0);
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Fresh leaf with a copy of the values and no history.
  Tensor detach(bool requires_grad = false) const {
    return from(shape(), node_->data, requires_grad);
  }

  std::vector<Real> to_vector() const { return node_->data; }

  void backward() const;

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<Real> data, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->leaf = false;
  const bool rg = std::any_of(inputs.begin(), inputs.end(),
                              [](const Tensor& t) { return t.requires_grad(); });
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Shape like(const Tensor& t, std::size_t rows, std::size_t cols) {
  if (t.rank() == 2) return {rows, cols};
  if (rows != 1) return {rows, cols};
  return {cols};
}

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(shape()));
  if (!std::isfinite(node_->data[0])) throw NumericError("non-finite loss in backward()");
  if (!node_->requires_grad) throw StateError("backward() on a tensor that does not require grad");
  if (!node_->leaf && !node_->backward) throw StateError("backward() on a released graph");

  // Post-order DFS: parents before children.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_span()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (n->leaf) continue;
    n->parents.clear();
    n->backward = nullptr;
    if (n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      auto g = p->grad_span();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto ga = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = self.parents[1]->grad_span();
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto ga = pa.grad_span();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * pb.data[i];
    auto gb = pb.grad_span();
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * pa.data[i];
  });
}

inline Tensor scale(const Tensor& a, Real s) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, Real s) { return scale(a, s); }
inline Tensor operator*(Real s, const Tensor& a) { return scale(a, s); }

inline Tensor add_scalar(const Tensor& a, Real s) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor leaky_relu(const Tensor& x, Real slope = 0.01) {
  if (!(slope > 0.0 && slope < 1.0)) throw DomainError("leaky_relu slope must lie in (0,1)");
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  return detail::make_result(x.shape(), std::move(out), {x}, [slope](detail::Node& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_span();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (p.data[i] > 0.0 ? 1.0 : slope);
  });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr Real kInvSqrt2 = 0.70710678118654752440;
  constexpr Real kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_span();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = p.data[i];
      const Real cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      g[i] += self.grad[i] * (cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v));
    }
  });
}

inline Tensor exp(const Tensor& x) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
  });
}

// Gradient is passed only where lo < x < hi.
inline Tensor clamp(const Tensor& x, Real lo, Real hi) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return detail::make_result(x.shape(), std::move(out), {x}, [lo, hi](detail::Node& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_span();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.data[i] > lo && p.data[i] < hi) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  Real s = 0.0;
  for (Real v : x.data()) s += v;
  return detail::make_result({}, {s}, {x}, [](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Real>(x.numel())); }

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// C[m x n] += A[m x k] B[k x n], all row-major.
inline void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const Real* A, const Real* B,
                     Real* C) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real a = A[i * k + p];
      const Real* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += a * b[j];
    }
  }
}

inline std::vector<Real> transposed(const Real* A, std::size_t rows, std::size_t cols) {
  std::vector<Real> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = A[r * cols + c];
  return t;
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<Real> out(m * n, 0.0);
  detail::gemm_acc(m, k, n, a.data().data(), b.data().data(), out.data());
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const Real* G = self.grad.data();
    if (auto ga = pa.grad_span(); !ga.empty()) {
      auto bt = detail::transposed(pb.data.data(), k, n);
      detail::gemm_acc(m, n, k, G, bt.data(), ga.data());
    }
    if (auto gb = pb.grad_span(); !gb.empty()) {
      auto at = detail::transposed(pa.data.data(), m, k);
      detail::gemm_acc(k, m, n, at.data(), G, gb.data());
    }
  });
}

// Affine map y = x Wᵀ + b with W stored [out x in]. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  if (weight.rank() != 2 || x.cols() != weight.cols() || x.rank() == 0)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " with weight " +
                     shape_str(weight.shape()));
  const std::size_t batch = x.rows(), in = x.cols(), out_dim = weight.rows();
  if (bias.defined() && bias.numel() != out_dim)
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(out_dim) +
                     " outputs");
  auto wt = detail::transposed(weight.data().data(), out_dim, in);
  std::vector<Real> out(batch * out_dim, 0.0);
  if (bias.defined())
    for (std::size_t i = 0; i < batch; ++i)
      std::copy(bias.data().begin(), bias.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * out_dim));
  detail::gemm_acc(batch, in, out_dim, x.data().data(), wt.data(), out.data());
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      detail::like(x, batch, out_dim), std::move(out), std::move(inputs),
      [batch, in, out_dim](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const Real* G = self.grad.data();
        if (auto gx = px.grad_span(); !gx.empty())
          detail::gemm_acc(batch, out_dim, in, G, pw.data.data(), gx.data());
        if (auto gw = pw.grad_span(); !gw.empty()) {
          auto gt = detail::transposed(G, batch, out_dim);
          detail::gemm_acc(out_dim, batch, in, gt.data(), px.data.data(), gw.data());
        }
        if (self.parents.size() > 2) {
          if (auto gb = self.parents[2]->grad_span(); !gb.empty())
            for (std::size_t i = 0; i < batch; ++i)
              for (std::size_t o = 0; o < out_dim; ++o) gb[o] += G[i * out_dim + o];
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i, j);
  return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

// a[m x n] + v[n] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& v) {
  if (v.numel() != a.cols())
    throw ShapeError("add_row: " + shape_str(a.shape()) + " with " + shape_str(v.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v[j];
  return detail::make_result(a.shape(), std::move(out), {a, v}, [m, n](detail::Node& self) {
    if (auto ga = self.parents[0]->grad_span(); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    if (auto gv = self.parents[1]->grad_span(); !gv.empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[j] += self.grad[i * n + j];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  return detail::make_result(std::move(shape), a.to_vector(), {a}, [](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  if (a.rank() != 2 || count == 0 || begin + count > a.rows())
    throw ShapeError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") of " + shape_str(a.shape()));
  const std::size_t n = a.cols();
  std::vector<Real> out(a.data().begin() + begin * n, a.data().begin() + (begin + count) * n);
  return detail::make_result({count, n}, std::move(out), {a}, [begin, n](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > a.cols() || a.rank() == 0)
    throw ShapeError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") of " + shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.at(i, begin + j);
  return detail::make_result(detail::like(a, m, count), std::move(out), {a},
                             [m, n, begin, count](detail::Node& self) {
                               auto g = self.parents[0]->grad_span();
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < count; ++j)
                                   g[i * n + begin + j] += self.grad[i * count + j];
                             });
}

// Stacks rank-1 or rank-2 pieces with equal column counts into one matrix.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  for (auto& p : parts) {
    if (p.cols() != n)
      throw ShapeError("concat_rows: " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.rows();
  }
  std::vector<Real> out;
  out.reserve(total * n);
  for (auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result({total, n}, std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      auto g = p->grad_span();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      off += p->data.size();
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (auto& p : parts) {
    if (p.rows() != m)
      throw ShapeError("concat_cols: " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.cols();
  }
  std::vector<Real> out(m * total);
  std::size_t off = 0;
  for (auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * total + off + j] = p.at(i, j);
    off += p.cols();
  }
  return detail::make_result({m, total}, std::move(out), parts, [m, total](detail::Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->data.size() / m;
      auto g = p->grad_span();
      if (!g.empty())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + off + j];
      off += w;
    }
  });
}

// Rows of `table` selected by `ids`, stacked in order.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2 || ids.empty()) throw ShapeError("gather_rows needs a matrix and ids");
  const std::size_t n = table.cols();
  std::vector<Real> out;
  out.reserve(ids.size() * n);
  for (auto id : ids) {
    if (id >= table.rows())
      throw IndexError("row " + std::to_string(id) + " of " + shape_str(table.shape()));
    out.insert(out.end(), table.data().begin() + id * n, table.data().begin() + (id + 1) * n);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return detail::make_result({idx.size(), n}, std::move(out), {table},
                             [idx, n](detail::Node& self) {
                               auto g = self.parents[0]->grad_span();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[idx[r] * n + j] += self.grad[r * n + j];
                             });
}

// ---------------------------------------------------------------------------
// Normalisation and attention helpers

// Row-wise softmax with max subtraction. With `causal`, entry (i, j) for j > i is masked out.
inline Tensor softmax_rows(const Tensor& x, bool causal = false) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<Real> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t lim = causal ? std::min(n, i + 1) : n;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, x.at(i, j));
    Real z = 0.0;
    for (std::size_t j = 0; j < lim; ++j) z += (out[i * n + j] = std::exp(x.at(i, j) - mx));
    for (std::size_t j = 0; j < lim; ++j) out[i * n + j] /= z;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [m, n](detail::Node& self) {
    auto g = self.parents[0]->grad_span();
    for (std::size_t i = 0; i < m; ++i) {
      Real dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.data[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += self.data[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

// Multi-head causal self-attention over independent row segments. q, k, v are
// [N x d] with heads laid out as contiguous column blocks; `lengths` partitions
// the N rows into sequences that never attend to each other.
inline Tensor segment_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                       std::span<const std::size_t> lengths, std::size_t heads) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const std::size_t rows = q.rows(), d = q.cols();
  if (q.rank() != 2 || heads == 0 || d % heads != 0)
    throw ShapeError("attention: " + shape_str(q.shape()) + " with " + std::to_string(heads) +
                     " heads");
  std::size_t total = 0;
  for (auto len : lengths) total += len;
  if (total != rows)
    throw ShapeError("attention: segments cover " + std::to_string(total) + " of " +
                     std::to_string(rows) + " rows");
  const std::size_t dh = d / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  std::vector<std::size_t> starts;
  for (std::size_t s = 0, off = 0; s < lengths.size(); off += lengths[s++]) starts.push_back(off);
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());

  // probs holds, per (segment, head), a lower-triangular len x len block.
  std::vector<Real> probs, out(rows * d, 0.0);
  const Real *Q = q.data().data(), *K = k.data().data(), *V = v.data().data();
  for (std::size_t s = 0; s < lens.size(); ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = starts[s], len = lens[s], col = h * dh;
      const std::size_t p0 = probs.size();
      probs.resize(p0 + len * len, 0.0);
      for (std::size_t a = 0; a < len; ++a) {
        Real* pr = probs.data() + p0 + a * len;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t b = 0; b <= a; ++b) {
          Real dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            dot += Q[(base + a) * d + col + c] * K[(base + b) * d + col + c];
          pr[b] = dot * scale;
          mx = std::max(mx, pr[b]);
        }
        Real z = 0.0;
        for (std::size_t b = 0; b <= a; ++b) z += (pr[b] = std::exp(pr[b] - mx));
        for (std::size_t b = 0; b <= a; ++b) {
          pr[b] /= z;
          for (std::size_t c = 0; c < dh; ++c)
            out[(base + a) * d + col + c] += pr[b] * V[(base + b) * d + col + c];
        }
      }
    }
  return detail::make_result(
      {rows, d}, std::move(out), {q, k, v},
      [d, heads, dh, scale, starts = std::move(starts), lens = std::move(lens),
       probs = std::move(probs)](detail::Node& self) {
        auto gq = self.parents[0]->grad_span();
        auto gk = self.parents[1]->grad_span();
        auto gv = self.parents[2]->grad_span();
        const Real *Q = self.parents[0]->data.data(), *K = self.parents[1]->data.data(),
                   *V = self.parents[2]->data.data(), *G = self.grad.data();
        std::size_t p0 = 0;
        std::vector<Real> dp;
        for (std::size_t s = 0; s < lens.size(); ++s)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = starts[s], len = lens[s], col = h * dh;
            dp.assign(len, 0.0);
            for (std::size_t a = 0; a < len; ++a) {
              const Real* pr = probs.data() + p0 + a * len;
              const Real* ga = G + (base + a) * d + col;
              Real dot = 0.0;
              for (std::size_t b = 0; b <= a; ++b) {
                Real g = 0.0;
                for (std::size_t c = 0; c < dh; ++c) g += ga[c] * V[(base + b) * d + col + c];
                dp[b] = g;
                dot += pr[b] * g;
                if (!gv.empty())
                  for (std::size_t c = 0; c < dh; ++c) gv[(base + b) * d + col + c] += pr[b] * ga[c];
              }
              for (std::size_t b = 0; b <= a; ++b) {
                const Real ds = pr[b] * (dp[b] - dot) * scale;
                if (!gq.empty())
                  for (std::size_t c = 0; c < dh; ++c)
                    gq[(base + a) * d + col + c] += ds * K[(base + b) * d + col + c];
                if (!gk.empty())
                  for (std::size_t c = 0; c < dh; ++c)
                    gk[(base + b) * d + col + c] += ds * Q[(base + a) * d + col + c];
              }
            }
            p0 += len * len;
          }
      });
}

// Per-row layer normalisation followed by an elementwise affine (gain, bias over columns).
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              Real eps = 1e-5) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layer_norm: " + shape_str(x.shape()) + " with gain " +
                     shape_str(gain.shape()));
  std::vector<Real> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    Real mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x.at(i, j);
    mu /= static_cast<Real>(n);
    Real var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
    var /= static_cast<Real>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x.at(i, j) - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& pg = *self.parents[1];
        const Real* G = self.grad.data();
        if (auto gx = self.parents[0]->grad_span(); !gx.empty()) {
          std::vector<Real> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            Real mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = G[i * n + j] * pg.data[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[i * n + j];
            }
            mean_d /= static_cast<Real>(n);
            mean_dx /= static_cast<Real>(n);
            for (std::size_t j = 0; j < n; ++j)
              gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
        if (auto gg = pg.grad_span(); !gg.empty())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += G[i * n + j] * xhat[i * n + j];
        if (auto gb = self.parents[2]->grad_span(); !gb.empty())
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += G[i * n + j];
      });
}

// Each row scaled to unit Euclidean norm.
inline Tensor normalize_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<Real> out(m * n), norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    Real s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.at(i, j) * x.at(i, j);
    norms[i] = std::sqrt(s);
    if (!(norms[i] > 0.0)) throw DomainError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) / norms[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [m, n, norms = std::move(norms)](detail::Node& self) {
                               auto g = self.parents[0]->grad_span();
                               for (std::size_t i = 0; i < m; ++i) {
                                 Real dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j)
                                   dot += self.grad[i * n + j] * self.data[i * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] +=
                                       (self.grad[i * n + j] - self.data[i * n + j] * dot) / norms[i];
                               }
                             });
}

// u·v / (|u| |v|) as a scalar. Both operands must have the same number of elements.
inline Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  if (u.numel() != v.numel())
    throw ShapeError("cosine_similarity: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  Real uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.numel(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!(uu > 0.0) || !(vv > 0.0)) throw DomainError("cosine_similarity of a zero-norm vector");
  const Real nu = std::sqrt(uu), nv = std::sqrt(vv);
  const Real s = std::clamp(uv / (nu * nv), -1.0, 1.0);
  return detail::make_result({}, {s}, {u, v}, [nu, nv, s](detail::Node& self) {
    auto& pu = *self.parents[0];
    auto& pv = *self.parents[1];
    const Real g = self.grad[0];
    if (auto gu = pu.grad_span(); !gu.empty())
      for (std::size_t i = 0; i < gu.size(); ++i)
        gu[i] += g * (pv.data[i] / (nu * nv) - s * pu.data[i] / (nu * nu));
    if (auto gv = pv.grad_span(); !gv.empty())
      for (std::size_t i = 0; i < gv.size(); ++i)
        gv[i] += g * (pu.data[i] / (nu * nv) - s * pv.data[i] / (nv * nv));
  });
}

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     shape_str(logits.shape()));
  std::vector<Real> probs(b * c);
  Real loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c)
      throw IndexError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    std::size_t arg = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, arg)) arg = j;
    const Real mx = logits.at(i, arg);
    // The max term contributes exactly 1; log1p keeps the rest accurate when it is tiny.
    Real rest = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(logits.at(i, j) - mx);
      if (j != arg) rest += probs[i * c + j];
    }
    const Real z = 1.0 + rest;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    loss += -(logits.at(i, labels[i]) - mx - std::log1p(rest));
  }
  loss /= static_cast<Real>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return detail::make_result(
      {}, {loss}, {logits},
      [b, c, probs = std::move(probs), lab = std::move(lab)](detail::Node& self) {
        auto g = self.parents[0]->grad_span();
        const Real s = self.grad[0] / static_cast<Real>(b);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += s * (probs[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
      });
}

}  // namespace cgil
