#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Graphs are built eagerly: every op returns a new Tensor whose node keeps
// shared ownership of its parents and a closure that pushes gradients back to
// them. Graphs are single-use per batch; leaf gradients accumulate across
// backward() calls until explicitly cleared.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fedx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;  // reads grad, accumulates into parents
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor parameter(Shape shape, std::vector<T> data) {
    return make_leaf(std::move(shape), std::move(data), true);
  }
  static Tensor constant(Shape shape, std::vector<T> data) {
    return make_leaf(std::move(shape), std::move(data), false);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return make_leaf(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    return make_leaf({1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return node_->value[0];
  }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool all_finite() const {
    for (T v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Runs reverse-mode differentiation from this scalar root.
  void backward() const {
    if (!node_) throw std::invalid_argument("backward: undefined tensor");
    if (numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!node_->requires_grad)
      throw std::invalid_argument("backward: root has no tracked ancestors");
    if (node_->backward_done)
      throw std::logic_error("backward: graph already consumed; clear gradients and rebuild");
    node_->backward_done = true;

    // Topological order over grad-requiring nodes, children before parents.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node* p = n->parents[idx++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop(**it);
  }

 private:
  static Tensor make_leaf(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor: element count does not match shape");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), T(0));
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backprop) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), T(0));
  for (auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) {
    n->grad.assign(n->value.size(), T(0));
    n->backprop = std::move(backprop);
  }
  return Tensor<T>(std::move(n));
}

// C[n,m] += A[n,k] * B[k,m]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* Arow = A + i * k;
    T* Crow = C + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      T a = Arow[l];
      const T* Brow = B + l * m;
      for (std::size_t j = 0; j < m; ++j) Crow[j] += a * Brow[j];
    }
  }
}

// C[n,p] += A[n,k] * B[p,k]^T
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* Arow = A + i * k;
    T* Crow = C + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const T* Brow = B + j * k;
      T acc = 0;
      for (std::size_t l = 0; l < k; ++l) acc += Arow[l] * Brow[l];
      Crow[j] += acc;
    }
  }
}

// C[k,m] += A[n,k]^T * B[n,m]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* Arow = A + i * k;
    const T* Brow = B + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      T a = Arow[l];
      T* Crow = C + l * m;
      for (std::size_t j = 0; j < m; ++j) Crow[j] += a * Brow[j];
    }
  }
}

inline void check_matrix(const Shape& s, const char* who) {
  if (s.size() != 2) throw std::invalid_argument(std::string(who) + ": expected a matrix");
}

}  // namespace detail

// ---- shape helpers ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  auto out = detail::make_op<T>(std::move(shape), {a}, nullptr);
  out.value() = a.value();
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backprop = [an](TensorNode<T>& self) {
      if (!an->requires_grad) return;
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::constant(a.shape(), a.value());
}

// ---- elementwise ----

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Bwd bwd, const char* /*name*/) {
  auto out = detail::make_op<T>(a.shape(), {a}, nullptr);
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = fwd(a.value()[i]);
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backprop = [an, bwd](TensorNode<T>& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bwd(an->value[i], self.value[i]);
    };
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); }, "relu");
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <typename T>
Tensor<T> exp_(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Tensor<T> log_(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }, "log");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return c * x; }, [c](T, T) { return c; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op(
      a, [c](T x) { return x + c; }, [](T, T) { return T(1); }, "add_scalar");
}

// Clamps values into [lo, hi]; the gradient passes through unchanged (the
// clamp only guards against rounding past the mathematical range).
template <typename T>
Tensor<T> clamp_pass(const Tensor<T>& a, T lo, T hi) {
  return unary_op(
      a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); }, [](T, T) { return T(1); },
      "clamp_pass");
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.shape() != b.shape()) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  auto out = detail::make_op<T>(a.shape(), {a, b}, nullptr);
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + b.value()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn](TensorNode<T>& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (an->requires_grad) an->grad[i] += self.grad[i];
        if (bn->requires_grad) bn->grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  auto out = detail::make_op<T>(a.shape(), {a, b}, nullptr);
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] - b.value()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn](TensorNode<T>& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (an->requires_grad) an->grad[i] += self.grad[i];
        if (bn->requires_grad) bn->grad[i] -= self.grad[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  auto out = detail::make_op<T>(a.shape(), {a, b}, nullptr);
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * b.value()[i];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn](TensorNode<T>& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (an->requires_grad) an->grad[i] += self.grad[i] * bn->value[i];
        if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return out;
}

// ---- matrix ops ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a.shape(), "matmul");
  detail::check_matrix(b.shape(), "matmul");
  std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  auto out = detail::make_op<T>({n, m}, {a, b}, nullptr);
  detail::gemm_acc(a.value().data(), b.value().data(), out.value().data(), n, k, m);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn, n, k, m](TensorNode<T>& self) {
      if (an->requires_grad)
        detail::gemm_nt_acc(self.grad.data(), bn->value.data(), an->grad.data(), n, m, k);
      if (bn->requires_grad)
        detail::gemm_tn_acc(an->value.data(), self.grad.data(), bn->grad.data(), n, k, m);
    };
  }
  return out;
}

// A [n,k] times B^T for B [p,k]; result [n,p].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a.shape(), "matmul_nt");
  detail::check_matrix(b.shape(), "matmul_nt");
  std::size_t n = a.shape()[0], k = a.shape()[1], p = b.shape()[0];
  if (b.shape()[1] != k) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  auto out = detail::make_op<T>({n, p}, {a, b}, nullptr);
  detail::gemm_nt_acc(a.value().data(), b.value().data(), out.value().data(), n, k, p);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn, n, k, p](TensorNode<T>& self) {
      if (an->requires_grad)
        detail::gemm_acc(self.grad.data(), bn->value.data(), an->grad.data(), n, p, k);
      if (bn->requires_grad)
        detail::gemm_tn_acc(self.grad.data(), an->value.data(), bn->grad.data(), n, p, k);
    };
  }
  return out;
}

// Adds a row vector b [m] to every row of X [n,m].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  detail::check_matrix(x.shape(), "add_rowvec");
  std::size_t n = x.shape()[0], m = x.shape()[1];
  if (b.numel() != m) throw std::invalid_argument("add_rowvec: bias length mismatch");
  auto out = detail::make_op<T>({n, m}, {x, b}, nullptr);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out.value()[i * m + j] = x.value()[i * m + j] + b.value()[j];
  if (out.requires_grad()) {
    auto xn = x.node(), bn = b.node();
    out.node()->backprop = [xn, bn, n, m](TensorNode<T>& self) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          if (xn->requires_grad) xn->grad[i * m + j] += self.grad[i * m + j];
          if (bn->requires_grad) bn->grad[j] += self.grad[i * m + j];
        }
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a.shape(), "concat_rows");
  detail::check_matrix(b.shape(), "concat_rows");
  if (a.shape()[1] != b.shape()[1])
    throw std::invalid_argument("concat_rows: column count mismatch");
  std::size_t n = a.shape()[0], p = b.shape()[0], m = a.shape()[1];
  auto out = detail::make_op<T>({n + p, m}, {a, b}, nullptr);
  std::copy(a.value().begin(), a.value().end(), out.value().begin());
  std::copy(b.value().begin(), b.value().end(), out.value().begin() + n * m);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn, n, p, m](TensorNode<T>& self) {
      if (an->requires_grad)
        for (std::size_t i = 0; i < n * m; ++i) an->grad[i] += self.grad[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < p * m; ++i) bn->grad[i] += self.grad[n * m + i];
    };
  }
  return out;
}

// Normalizes each row of X to unit Euclidean norm. A zero row is an error:
// it signals a degenerate embedding upstream.
template <typename T>
Tensor<T> row_normalize(const Tensor<T>& x) {
  detail::check_matrix(x.shape(), "row_normalize");
  std::size_t n = x.shape()[0], m = x.shape()[1];
  auto out = detail::make_op<T>({n, m}, {x}, nullptr);
  auto norms = std::make_shared<std::vector<T>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < m; ++j) s += x.value()[i * m + j] * x.value()[i * m + j];
    T nr = std::sqrt(s);
    if (!(nr > T(0))) throw std::domain_error("row_normalize: zero-norm row");
    (*norms)[i] = nr;
    for (std::size_t j = 0; j < m; ++j) out.value()[i * m + j] = x.value()[i * m + j] / nr;
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn, norms, n, m](TensorNode<T>& self) {
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * self.value[i * m + j];
        for (std::size_t j = 0; j < m; ++j)
          xn->grad[i * m + j] +=
              (self.grad[i * m + j] - dot * self.value[i * m + j]) / (*norms)[i];
      }
    };
  }
  return out;
}

// Per-row standardization: subtracts the row mean and divides by the row
// standard deviation (with a small epsilon). Keeps hidden activations
// centered so that randomly initialized networks do not map every input
// to nearly the same direction.
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, T eps = T(1e-5)) {
  detail::check_matrix(x.shape(), "layer_norm_rows");
  std::size_t n = x.shape()[0], m = x.shape()[1];
  auto out = detail::make_op<T>({n, m}, {x}, nullptr);
  auto inv_sd = std::make_shared<std::vector<T>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < m; ++j) mu += x.value()[i * m + j];
    mu /= T(m);
    T var = 0;
    for (std::size_t j = 0; j < m; ++j) {
      T d = x.value()[i * m + j] - mu;
      var += d * d;
    }
    T s = std::sqrt(var / T(m) + eps);
    (*inv_sd)[i] = T(1) / s;
    for (std::size_t j = 0; j < m; ++j) out.value()[i * m + j] = (x.value()[i * m + j] - mu) / s;
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn, inv_sd, n, m](TensorNode<T>& self) {
      for (std::size_t i = 0; i < n; ++i) {
        T gmean = 0, gy = 0;
        for (std::size_t j = 0; j < m; ++j) {
          gmean += self.grad[i * m + j];
          gy += self.grad[i * m + j] * self.value[i * m + j];
        }
        gmean /= T(m);
        gy /= T(m);
        for (std::size_t j = 0; j < m; ++j)
          xn->grad[i * m + j] += (self.grad[i * m + j] - gmean - self.value[i * m + j] * gy) *
                                 (*inv_sd)[i];
      }
    };
  }
  return out;
}

// Per-column standardization over the rows of X: subtracts the column mean
// and divides by the column standard deviation (with a small epsilon).
// Removes the shared offset that otherwise accumulates across samples and
// dominates cosine similarities. Needs at least two rows to be meaningful.
template <typename T>
Tensor<T> standardize_cols(const Tensor<T>& x, T eps = T(1e-5)) {
  detail::check_matrix(x.shape(), "standardize_cols");
  std::size_t n = x.shape()[0], m = x.shape()[1];
  if (n < 2) throw std::invalid_argument("standardize_cols: needs at least 2 rows");
  auto out = detail::make_op<T>({n, m}, {x}, nullptr);
  auto inv_sd = std::make_shared<std::vector<T>>(m);
  for (std::size_t j = 0; j < m; ++j) {
    T mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += x.value()[i * m + j];
    mu /= T(n);
    T var = 0;
    for (std::size_t i = 0; i < n; ++i) {
      T d = x.value()[i * m + j] - mu;
      var += d * d;
    }
    T s = std::sqrt(var / T(n) + eps);
    (*inv_sd)[j] = T(1) / s;
    for (std::size_t i = 0; i < n; ++i) out.value()[i * m + j] = (x.value()[i * m + j] - mu) / s;
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn, inv_sd, n, m](TensorNode<T>& self) {
      for (std::size_t j = 0; j < m; ++j) {
        T gmean = 0, gy = 0;
        for (std::size_t i = 0; i < n; ++i) {
          gmean += self.grad[i * m + j];
          gy += self.grad[i * m + j] * self.value[i * m + j];
        }
        gmean /= T(n);
        gy /= T(n);
        for (std::size_t i = 0; i < n; ++i)
          xn->grad[i * m + j] += (self.grad[i * m + j] - gmean - self.value[i * m + j] * gy) *
                                 (*inv_sd)[j];
      }
    };
  }
  return out;
}

// Row-wise softmax of X / tau with max-subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, T tau) {
  detail::check_matrix(x.shape(), "softmax_rows");
  if (!(tau > T(0))) throw std::invalid_argument("softmax_rows: temperature must be positive");
  std::size_t n = x.shape()[0], m = x.shape()[1];
  auto out = detail::make_op<T>({n, m}, {x}, nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = x.value()[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x.value()[i * m + j]);
    T denom = 0;
    for (std::size_t j = 0; j < m; ++j) {
      T e = std::exp((x.value()[i * m + j] - mx) / tau);
      out.value()[i * m + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < m; ++j) out.value()[i * m + j] /= denom;
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn, tau, n, m](TensorNode<T>& self) {
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * self.value[i * m + j];
        for (std::size_t j = 0; j < m; ++j)
          xn->grad[i * m + j] +=
              self.value[i * m + j] * (self.grad[i * m + j] - dot) / tau;
      }
    };
  }
  return out;
}

// ---- reductions ----

template <typename T>
Tensor<T> rowsum(const Tensor<T>& x) {
  detail::check_matrix(x.shape(), "rowsum");
  std::size_t n = x.shape()[0], m = x.shape()[1];
  auto out = detail::make_op<T>({n}, {x}, nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < m; ++j) s += x.value()[i * m + j];
    out.value()[i] = s;
  }
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn, n, m](TensorNode<T>& self) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) xn->grad[i * m + j] += self.grad[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = detail::make_op<T>({1}, {x}, nullptr);
  out.value()[0] = std::accumulate(x.value().begin(), x.value().end(), T(0));
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn](TensorNode<T>& self) {
      for (auto& g : xn->grad) g += self.grad[0];
    };
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  std::size_t n = x.numel();
  auto out = detail::make_op<T>({1}, {x}, nullptr);
  out.value()[0] = std::accumulate(x.value().begin(), x.value().end(), T(0)) / T(n);
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn, n](TensorNode<T>& self) {
      for (auto& g : xn->grad) g += self.grad[0] / T(n);
    };
  }
  return out;
}

// Row-wise KL divergence between matrices of probability rows P and Q;
// result [n]. Rows of P may contain exact zeros (0*log(0/q) counts as 0).
template <typename T>
Tensor<T> kl_rows(const Tensor<T>& p, const Tensor<T>& q) {
  check_same_shape(p, q, "kl_rows");
  detail::check_matrix(p.shape(), "kl_rows");
  std::size_t n = p.shape()[0], m = p.shape()[1];
  auto out = detail::make_op<T>({n}, {p, q}, nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < m; ++j) {
      T pv = p.value()[i * m + j];
      if (pv > T(0)) s += pv * std::log(pv / q.value()[i * m + j]);
    }
    out.value()[i] = s;
  }
  if (out.requires_grad()) {
    auto pn = p.node(), qn = q.node();
    out.node()->backprop = [pn, qn, n, m](TensorNode<T>& self) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          T pv = pn->value[i * m + j], qv = qn->value[i * m + j];
          if (pn->requires_grad && pv > T(0))
            pn->grad[i * m + j] += self.grad[i] * (std::log(pv / qv) + T(1));
          if (qn->requires_grad && pv > T(0))
            qn->grad[i * m + j] -= self.grad[i] * pv / qv;
        }
    };
  }
  return out;
}

// ---- spec-level vector operations ----

// Cosine similarity of two equal-length vectors, clamped to [-1,1].
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel())
    throw std::invalid_argument("cosine_similarity: length mismatch");
  auto ar = reshape(a, {1, a.numel()});
  auto br = reshape(b, {1, b.numel()});
  auto s = matmul_nt(row_normalize(ar), row_normalize(br));
  return clamp_pass(reshape(s, {1}), T(-1), T(1));
}

// Softmax over a score vector at temperature tau.
template <typename T>
Tensor<T> softmax_with_temperature(const Tensor<T>& scores, T tau) {
  if (!(tau > T(0)))
    throw std::invalid_argument("softmax_with_temperature: temperature must be positive");
  for (T v : scores.value())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument("softmax_with_temperature: non-finite score");
  std::size_t m = scores.numel();
  return reshape(softmax_rows(reshape(scores, {1, m}), tau), {m});
}

// KL(p || q) over probability vectors. Validates normalization and support.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
  if (p.numel() != q.numel()) throw std::invalid_argument("kl_divergence: length mismatch");
  T sp = std::accumulate(p.value().begin(), p.value().end(), T(0));
  T sq = std::accumulate(q.value().begin(), q.value().end(), T(0));
  if (std::abs(sp - T(1)) > T(1e-6) || std::abs(sq - T(1)) > T(1e-6))
    throw std::invalid_argument("kl_divergence: inputs must sum to 1");
  for (std::size_t i = 0; i < p.numel(); ++i)
    if (p.value()[i] > T(0) && !(q.value()[i] > T(0)))
      throw std::domain_error("kl_divergence: support violation (p>0 where q=0)");
  std::size_t m = p.numel();
  return reshape(kl_rows(reshape(p, {1, m}), reshape(q, {1, m})), {1});
}

// Returns d(root)/d(param) for each named tracked parameter. The root must be
// a scalar with at least one tracked ancestor.
template <typename T>
std::map<std::string, std::vector<T>> forward_backward(
    const Tensor<T>& root, const std::vector<std::pair<std::string, Tensor<T>>>& params) {
  root.backward();
  std::map<std::string, std::vector<T>> grads;
  for (const auto& [name, p] : params) grads[name] = p.grad();
  return grads;
}

}  // namespace fedx
