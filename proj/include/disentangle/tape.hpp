#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "disentangle/tensor.hpp"

namespace disentangle {

template <class Scalar>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy.
template <class Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records a computation in topological order and replays it backwards.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it. `backward` may be called several times on the same tape (the trainer
/// needs two separate gradients from one forward pass); each call starts
/// from cleared gradient buffers.
template <class Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(Tensor<Scalar> value) { return push(std::move(value), true, {}); }
  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, {}); }

  /// Records the output of an operation. The node requires a gradient only if
  /// one of its parents does; otherwise the backward rule is dropped.
  Var<Scalar> record(Tensor<Scalar> value, const std::vector<Var<Scalar>>& parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw std::invalid_argument("operand recorded on a different tape");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer for accumulation inside backward rules. Returns nullptr
  /// for nodes that do not require a gradient.
  Tensor<Scalar>* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor<Scalar>(n.value.shape, Scalar(0));
      n.has_grad = true;
    }
    return &n.grad;
  }

  /// Upstream gradient of a node during backward.
  const Tensor<Scalar>& upstream(std::size_t id) const { return nodes_[id].grad; }

  void backward(const Var<Scalar>& root) {
    if (root.size() != 1) {
      throw ShapeError("backward requires a scalar root, got shape " + to_string(root.shape()));
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<Scalar>();
    }
    if (!nodes_[root.id()].requires_grad) return;
    grad_buffer(root.id())->values[0] = Scalar(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  /// Gradient of the last backward root with respect to `v`; zeros when `v`
  /// is not on a path to the root.
  Tensor<Scalar> grad(const Var<Scalar>& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.has_grad) return n.grad;
    return Tensor<Scalar>(n.value.shape, Scalar(0));
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<Scalar>(), requires_grad, false, std::move(fn)});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace disentangle
