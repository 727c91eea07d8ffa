#pragma once

// Dense f64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Ops executed while grad
// mode is enabled and at least one operand requires a gradient record their
// inputs and a reverse rule on the produced node; backward() walks those
// records in reverse topological order. Graphs are per-thread units of work:
// nothing here is shared between distinct graphs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "embseg/errors.hpp"

namespace embseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> reverse;
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; intended for leaves (parameters, fixtures).
  std::span<double> mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  double item() const {
    if (size() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return node_->data[0];
  }

  // A new leaf sharing no state with this tensor.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }
  Tensor clone_leaf(bool requires_grad) const {
    return Tensor(shape(), node_->data, requires_grad);
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

// Builds the result node, attaching inputs and the reverse rule only when a
// gradient can flow.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> reverse) {
  Tensor out(std::move(shape), std::move(data), false);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto& node = *out.node();
  node.op = op;
  if (needs) {
    node.requires_grad = true;
    node.leaf = false;
    node.grad.assign(node.data.size(), 0.0);
    for (auto& in : inputs) node.inputs.push_back(in.node());
    node.reverse = std::move(reverse);
  }
  return out;
}

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

}  // namespace detail

// Reverse topological record of a graph: producers before consumers.
class Tape {
 public:
  explicit Tape(const Tensor& root) {
    detail::require_defined(root, "tape");
    if (!root.requires_grad()) return;
    // Iterative post-order DFS over nodes that carry gradients.
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        entries_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::span<detail::Node* const> entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<detail::Node*> entries_;
};

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// `loss`. Intermediate gradients are recomputed from zero on each call;
// leaf gradients accumulate until zero_grad().
inline void backward(const Tensor& loss) {
  detail::require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  Tape tape(loss);
  for (auto* node : tape.entries()) {
    if (!node->leaf) std::fill(node->grad.begin(), node->grad.end(), 0.0);
  }
  loss.node()->grad[0] += 1.0;
  auto entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (!(*it)->leaf && (*it)->reverse) (*it)->reverse(**it);
  }
}

// ---------------------------------------------------------------------------
// Core ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require_defined(x, "reshape");
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  return detail::make_result(
      "reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
      {x}, [](detail::Node& out) {
        auto& in = *out.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < out.grad.size(); ++i) in.grad[i] += out.grad[i];
      });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_defined(a, "matmul");
  detail::require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b},
                             [m, k, n](detail::Node& node) {
    auto& na = *node.inputs[0];
    auto& nb = *node.inputs[1];
    const auto& g = node.grad;
    if (na.requires_grad) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * nb.data[p * n + j];
          na.grad[i * k + p] += acc;
        }
      }
    }
    if (nb.requires_grad) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = na.data[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) nb.grad[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
}

namespace detail {

enum class Binary { kAdd, kSub, kMul };

// Elementwise binary op. Shapes must match exactly, except that either side
// may be a rank-0 scalar tensor.
inline Tensor binary(const char* op, Binary kind, const Tensor& a, const Tensor& b) {
  require_defined(a, op);
  require_defined(b, op);
  const bool sa = is_scalar(a) && !is_scalar(b);
  const bool sb = is_scalar(b) && !is_scalar(a);
  if (!sa && !sb && a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const Shape shape = sa ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = A[sa ? 0 : i];
    const double y = B[sb ? 0 : i];
    switch (kind) {
      case Binary::kAdd: out[i] = x + y; break;
      case Binary::kSub: out[i] = x - y; break;
      case Binary::kMul: out[i] = x * y; break;
    }
  }
  return make_result(op, shape, std::move(out), {a, b},
                     [kind, sa, sb, n](Node& node) {
    auto& na = *node.inputs[0];
    auto& nb = *node.inputs[1];
    for (std::size_t i = 0; i < n; ++i) {
      const double g = node.grad[i];
      const std::size_t ia = sa ? 0 : i;
      const std::size_t ib = sb ? 0 : i;
      double ga = 0.0, gb = 0.0;
      switch (kind) {
        case Binary::kAdd: ga = g; gb = g; break;
        case Binary::kSub: ga = g; gb = -g; break;
        case Binary::kMul: ga = g * nb.data[ib]; gb = g * na.data[ia]; break;
      }
      if (na.requires_grad) na.grad[ia] += ga;
      if (nb.requires_grad) nb.grad[ib] += gb;
    }
  });
}

// Elementwise unary op given value and derivative as functions of input x and
// output y.
template <typename F, typename D>
Tensor unary(const char* op, const Tensor& x, F f, D dfdx) {
  require_defined(x, op);
  std::vector<double> out(x.size());
  const auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(X[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [dfdx](Node& node) {
    auto& in = *node.inputs[0];
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      in.grad[i] += node.grad[i] * dfdx(in.data[i], node.data[i]);
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary("add", detail::Binary::kAdd, a, b);
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary("sub", detail::Binary::kSub, a, b);
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary("mul", detail::Binary::kMul, a, b);
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  detail::require_defined(x, "log");
  for (double v : x.data()) {
    if (!(v > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(v));
    }
  }
  return detail::unary(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// Sum of all elements; rank-0 result.
inline Tensor sum(const Tensor& x) {
  detail::require_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_result("sum", {}, {acc}, {x}, [](detail::Node& node) {
    auto& in = *node.inputs[0];
    const double g = node.grad[0];
    for (auto& gi : in.grad) gi += g;
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.defined() && x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace detail {

// Splits `shape` around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer, extent, inner;
};
inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// Sum over one axis; that axis is removed from the result shape.
inline Tensor sum(const Tensor& x, std::size_t axis) {
  detail::require_defined(x, "sum");
  const auto s = detail::split_axis(x.shape(), axis, "sum");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto X = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += X[(o * s.extent + e) * s.inner + i];
  return detail::make_result("sum_axis", std::move(shape), std::move(out), {x},
                             [s](detail::Node& node) {
    auto& in = *node.inputs[0];
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i)
          in.grad[(o * s.extent + e) * s.inner + i] += node.grad[o * s.inner + i];
  });
}

inline Tensor mean(const Tensor& x, std::size_t axis) {
  detail::require_defined(x, "mean");
  const auto s = detail::split_axis(x.shape(), axis, "mean");
  if (s.extent == 0) throw ShapeError("mean: empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(s.extent));
}

// Row-wise x / (||x|| + eps) along the last axis. Rows with norm below
// `min_norm` are rejected.
inline Tensor l2_normalize(const Tensor& x, double eps = 1e-12, double min_norm = 1e-12) {
  detail::require_defined(x, "l2_normalize");
  if (x.rank() == 0) throw ShapeError("l2_normalize: needs rank >= 1");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = cols == 0 ? 0 : x.size() / cols;
  std::vector<double> norms(rows);
  std::vector<double> out(x.size());
  const auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += X[r * cols + c] * X[r * cols + c];
    const double n = std::sqrt(ss);
    if (!(n >= min_norm)) {
      throw DomainError("l2_normalize: row " + std::to_string(r) + " has norm " +
                        std::to_string(n));
    }
    norms[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = X[r * cols + c] / (n + eps);
  }
  return detail::make_result(
      "l2_normalize", x.shape(), std::move(out), {x},
      [rows, cols, eps, norms = std::move(norms)](detail::Node& node) {
        auto& in = *node.inputs[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const double n = norms[r];
          const double s = n + eps;
          double gx = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            gx += node.grad[r * cols + c] * in.data[r * cols + c];
          const double k = gx / (s * s * n);
          for (std::size_t c = 0; c < cols; ++c) {
            in.grad[r * cols + c] += node.grad[r * cols + c] / s - in.data[r * cols + c] * k;
          }
        }
      });
}

// softmax(x / tau) along the last axis; tau is a positive rank-0 tensor and
// receives a gradient. Uses max-subtraction.
inline Tensor softmax_with_temperature(const Tensor& x, const Tensor& tau) {
  detail::require_defined(x, "softmax_with_temperature");
  detail::require_defined(tau, "softmax_with_temperature");
  if (tau.size() != 1) throw ShapeError("softmax_with_temperature: tau must be a scalar");
  const double t = tau.data()[0];
  if (!(t > 0.0)) {
    throw DomainError("softmax_with_temperature: tau must be > 0, got " + std::to_string(t));
  }
  if (x.rank() == 0) throw ShapeError("softmax_with_temperature: needs rank >= 1");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = cols == 0 ? 0 : x.size() / cols;
  std::vector<double> out(x.size());
  const auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &X[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = std::exp((row[c] - mx) / t);
      z += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return detail::make_result(
      "softmax_with_temperature", x.shape(), std::move(out), {x, tau},
      [rows, cols](detail::Node& node) {
        auto& nx = *node.inputs[0];
        auto& nt = *node.inputs[1];
        const double t = nt.data[0];
        double dtau = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          double pg = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            pg += node.data[r * cols + c] * node.grad[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            // gradient w.r.t. u = x / tau
            const double du = node.data[i] * (node.grad[i] - pg);
            if (nx.requires_grad) nx.grad[i] += du / t;
            dtau -= du * nx.data[i] / (t * t);
          }
        }
        if (nt.requires_grad) nt.grad[0] += dtau;
      });
}

inline Tensor softmax_with_temperature(const Tensor& x, double tau) {
  return softmax_with_temperature(x, Tensor::scalar(tau));
}

// log(softmax(x / tau)) along the last axis, without forming the softmax.
// Same value as log(softmax_with_temperature(x, tau)) but finite for any tau.
inline Tensor log_softmax_with_temperature(const Tensor& x, const Tensor& tau) {
  detail::require_defined(x, "log_softmax_with_temperature");
  detail::require_defined(tau, "log_softmax_with_temperature");
  if (tau.size() != 1) throw ShapeError("log_softmax_with_temperature: tau must be a scalar");
  const double t = tau.data()[0];
  if (!(t > 0.0)) {
    throw DomainError("log_softmax_with_temperature: tau must be > 0, got " +
                      std::to_string(t));
  }
  if (x.rank() == 0) throw ShapeError("log_softmax_with_temperature: needs rank >= 1");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = cols == 0 ? 0 : x.size() / cols;
  std::vector<double> out(x.size());
  const auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &X[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp((row[c] - mx) / t);
    const double lz = std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (row[c] - mx) / t - lz;
  }
  return detail::make_result(
      "log_softmax_with_temperature", x.shape(), std::move(out), {x, tau},
      [rows, cols](detail::Node& node) {
        auto& nx = *node.inputs[0];
        auto& nt = *node.inputs[1];
        const double t = nt.data[0];
        double dtau = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          double gsum = 0.0;
          for (std::size_t c = 0; c < cols; ++c) gsum += node.grad[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            const double du = node.grad[i] - std::exp(node.data[i]) * gsum;
            if (nx.requires_grad) nx.grad[i] += du / t;
            dtau -= du * nx.data[i] / (t * t);
          }
        }
        if (nt.requires_grad) nt.grad[0] += dtau;
      });
}

// Selects entries along axis 0.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  detail::require_defined(x, "gather_rows");
  if (x.rank() == 0) throw ShapeError("gather_rows: needs rank >= 1");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows == 0 ? 0 : x.size() / rows;
  Shape shape = x.shape();
  shape[0] = index.size();
  std::vector<double> out(index.size() * width);
  const auto X = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) +
                       " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(&X[index[i] * width], width, &out[i * width]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return detail::make_result("gather_rows", std::move(shape), std::move(out), {x},
                             [width, idx = std::move(idx)](detail::Node& node) {
    auto& in = *node.inputs[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < width; ++c)
        in.grad[idx[i] * width + c] += node.grad[i * width + c];
  });
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index) {
  return gather_rows(x, std::span<const std::size_t>(index));
}

// Half-open box [begin, end) in every dimension.
inline Tensor slice(const Tensor& x, const std::vector<std::size_t>& begin,
                    const std::vector<std::size_t>& end) {
  detail::require_defined(x, "slice");
  const auto& in_shape = x.shape();
  if (begin.size() != in_shape.size() || end.size() != in_shape.size()) {
    throw ShapeError("slice: region rank does not match " + shape_str(in_shape));
  }
  Shape shape(in_shape.size());
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    if (begin[d] >= end[d] || end[d] > in_shape[d]) {
      throw ShapeError("slice: invalid range [" + std::to_string(begin[d]) + "," +
                       std::to_string(end[d]) + ") on axis " + std::to_string(d) +
                       " of " + shape_str(in_shape));
    }
    shape[d] = end[d] - begin[d];
  }
  // Map each output element to its flat source offset.
  std::vector<std::size_t> src(numel(shape));
  std::vector<std::size_t> stride(in_shape.size(), 1);
  for (std::size_t d = in_shape.size(); d-- > 1;) stride[d - 1] = stride[d] * in_shape[d];
  std::vector<std::size_t> pos(shape.size(), 0);
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) off += (begin[d] + pos[d]) * stride[d];
    src[i] = off;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++pos[d] < shape[d]) break;
      pos[d] = 0;
    }
  }
  std::vector<double> out(src.size());
  const auto X = x.data();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = X[src[i]];
  return detail::make_result("slice", std::move(shape), std::move(out), {x},
                             [src = std::move(src)](detail::Node& node) {
    auto& in = *node.inputs[0];
    for (std::size_t i = 0; i < src.size(); ++i) in.grad[src[i]] += node.grad[i];
  });
}

// Stacks tensors along axis 0; trailing extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) detail::require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat: rank-0 inputs");
  Shape shape = first;
  shape[0] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size() ||
        !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat: shape " + shape_str(p.shape()) +
                       " incompatible with " + shape_str(first));
    }
    shape[0] += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(numel(shape));
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::make_result("concat", std::move(shape), std::move(out), parts,
                             [offsets = std::move(offsets)](detail::Node& node) {
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      auto& in = *node.inputs[k];
      if (!in.requires_grad) continue;
      for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += node.grad[offsets[k] + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference verification

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// `f` must be deterministic and map x to a scalar.
inline double check_gradients(const std::function<Tensor(const Tensor&)>& f,
                              const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw DomainError("check_gradients: eps must be > 0");
  Tensor leaf = x.clone_leaf(true);
  Tensor y = f(leaf);
  if (y.size() != 1) {
    throw ShapeError("check_gradients: f must return a scalar, got " + shape_str(y.shape()));
  }
  backward(y);
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  NoGradGuard guard;
  Tensor probe = x.clone_leaf(false);
  auto values = probe.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + eps;
    const double fp = f(probe).item();
    values[i] = orig - eps;
    const double fm = f(probe).item();
    values[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace embseg
