#pragma once

// Dense row-major tensors of doubles with a per-forward reverse-mode tape.
//
// Every differentiable op records its parents and a backward closure on the
// result node. The graph is owned by the result handles, so dropping the loss
// drops the tape. Leaves (parameters) keep their grad buffers until zeroed.

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

#include "evofa/error.hpp"

namespace evofa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  /// Builds a 2-D tensor from nested rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    const std::size_t m = rows.size();
    const std::size_t p = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * p);
    for (const auto& row : rows) {
      if (row.size() != p) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, p}, std::move(data), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t size() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }
  /// In-place access, reserved for initialization and explicit optimizer steps.
  std::span<double> mutable_data() { return node().data; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }
  double operator[](std::size_t i) const { return node().data[i]; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }
  bool is_leaf() const { return node().is_leaf; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  void zero_grad() { node().grad.clear(); }

  /// False when any element is NaN or infinite.
  bool is_finite() const {
    for (double v : node().data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Deep copy of the values, detached from any tape.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node().data, requires_grad);
  }
  Tensor detach() const { return clone(false); }

  /// Reverse-mode sweep from a scalar. Leaf grads accumulate across calls.
  void backward() const;

  // Internal: used by op implementations.
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

 private:
  detail::TensorNode& node() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

/// Wraps a freshly computed value as an op result. The tape entry is kept only
/// when recording is enabled and some parent needs gradients.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  auto& node = *out.node_ptr();
  node.requires_grad = true;
  node.is_leaf = false;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.node_ptr());
  node.backward_fn = std::move(backward_fn);
  return out;
}

/// Grad buffer of the i-th parent, or nullptr when it does not need one.
inline double* parent_grad(TensorNode& node, std::size_t i) {
  auto& parent = *node.parents[i];
  if (!parent.requires_grad) return nullptr;
  return parent.ensure_grad().data();
}

}  // namespace detail

inline void Tensor::backward() const {
  auto& root = node();
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  std::vector<std::pair<detail::TensorNode*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [current, next_parent] = stack.back();
    if (next_parent < current->parents.size()) {
      auto* parent = current->parents[next_parent++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(current);
      stack.pop_back();
    }
  }

  // Interior grads are per-sweep; only leaves accumulate.
  for (auto* n : order)
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  root.ensure_grad()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace evofa
