// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tall/error.hpp"
#include "tall/tensor.hpp"

namespace tall {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Shape& shape() const;
  std::span<const double> data() const;
  std::size_t numel() const;
  /// Size of the last axis.
  std::size_t cols() const { return shape().back(); }
  /// Product of all axes but the last.
  std::size_t rows() const { return numel() / cols(); }
  bool requires_grad() const;
  double item() const;
};

/// Define-by-run reverse-mode tape. Nodes are appended in execution order, so
/// inputs always precede their consumers; backward walks the nodes in exact
/// reverse recording order.
class Tape {
 public:
  enum class Mode { train, inference };

  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  explicit Tape(Mode mode = Mode::train) : mode_(mode) { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const noexcept { return mode_; }
  bool recording() const noexcept { return mode_ == Mode::train; }

  /// Leaf that never receives a gradient.
  Var constant(Tensor t) { return push_leaf(std::move(t), false); }

  /// Leaf owned by the tape that receives a gradient (in train mode).
  Var variable(Tensor t) { return push_leaf(std::move(t), recording()); }

  /// Leaf viewing an external tensor (a parameter). The tensor must outlive the
  /// tape. It receives a gradient iff it requires one and the tape is recording.
  /// Binding the same tensor twice returns the same Var.
  Var param(const Tensor& t) {
    if (auto it = bound_.find(&t); it != bound_.end()) return Var{this, it->second};
    Node node;
    node.shape = t.shape();
    node.external = t.data().data();
    node.size = t.numel();
    node.requires_grad = recording() && t.requires_grad();
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(std::move(node));
    bound_.emplace(&t, id);
    bound_order_.emplace_back(&t, id);
    return Var{this, id};
  }

  /// Appends an op result. `backward` is kept only when the result needs a gradient.
  Var emit(Shape shape, std::vector<double> value, bool needs_grad, BackwardFn backward) {
    if (shape_numel(shape) != value.size()) {
      throw ShapeError("op produced " + std::to_string(value.size()) + " values for shape " +
                       shape_str(shape));
    }
    Node node;
    node.shape = std::move(shape);
    node.owned = std::move(value);
    node.size = node.owned.size();
    node.requires_grad = recording() && needs_grad;
    if (node.requires_grad) node.backward = std::move(backward);
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(std::move(node));
    return Var{this, id};
  }

  /// Seeds d(loss)/d(loss) = seed and propagates. The loss must be a scalar.
  void backward(Var loss, double seed = 1.0) {
    check_var(loss);
    if (!recording()) throw ContractError("backward called on an inference tape");
    if (backward_done_) throw ContractError("backward already ran on this tape");
    Node& root = nodes_[loss.id];
    if (root.size != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.shape));
    }
    if (!root.requires_grad) {
      throw ContractError("loss does not depend on any tensor that requires grad");
    }
    backward_done_ = true;
    grad_buffer(loss.id)[0] += seed;
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.requires_grad && node.backward && !node.grad.empty()) node.backward(*this, id);
    }
  }

  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }

  std::span<const double> data(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return {n.external ? n.external : n.owned.data(), n.size};
  }

  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of a node; empty when none was propagated to it.
  std::span<const double> grad(Var v) const {
    check_var(v);
    return nodes_[v.id].grad;
  }

  Tensor value(Var v) const {
    check_var(v);
    auto d = data(v.id);
    return Tensor(nodes_[v.id].shape, std::vector<double>(d.begin(), d.end()));
  }

  /// Gradient accumulator of a node, zero-allocated on first use.
  std::span<double> grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.size, 0.0);
    return n.grad;
  }

  /// Visits bound parameters in binding order with their propagated gradient.
  template <class F>
  void for_each_param_grad(F&& fn) const {
    for (const auto& [tensor, id] : bound_order_) {
      const Node& n = nodes_[id];
      if (n.requires_grad && !n.grad.empty()) fn(*tensor, std::span<const double>(n.grad));
    }
  }

  std::span<const double> param_grad(const Tensor& t) const {
    auto it = bound_.find(&t);
    if (it == bound_.end()) return {};
    return nodes_[it->second].grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void check_var(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> owned;
    const double* external = nullptr;
    std::size_t size = 0;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push_leaf(Tensor t, bool requires_grad) {
    Node node;
    node.shape = t.shape();
    node.size = t.numel();
    node.owned.assign(t.data().begin(), t.data().end());
    node.requires_grad = requires_grad;
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(std::move(node));
    return Var{this, id};
  }

  Mode mode_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::uint32_t> bound_;
  std::vector<std::pair<const Tensor*, std::uint32_t>> bound_order_;
};

inline const Shape& Var::shape() const { return tape->shape(id); }
inline std::span<const double> Var::data() const { return tape->data(id); }
inline std::size_t Var::numel() const { return tape->data(id).size(); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

inline double Var::item() const {
  auto d = data();
  if (d.size() != 1) throw ContractError("item() on non-scalar of shape " + shape_str(shape()));
  return d[0];
}

/// Boolean attention mask; allowed(i, j) says query i may attend to key j.
class Mask {
 public:
  Mask(std::size_t rows, std::size_t cols, bool value)
      : rows_(rows), cols_(cols), allowed_(rows * cols, value ? 1 : 0) {}

  static Mask full(std::size_t rows, std::size_t cols) { return Mask(rows, cols, true); }

  /// allowed(i, j) == (j <= i).
  static Mask causal(std::size_t n) {
    if (n == 0) throw ContractError("causal mask needs n >= 1");
    Mask m(n, n, false);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * cols_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool value) { allowed_[i * cols_ + j] = value ? 1 : 0; }

  std::size_t count_allowed() const {
    std::size_t c = 0;
    for (auto a : allowed_) c += a;
    return c;
  }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<unsigned char> allowed_;
};

}  // namespace tall
