#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fccdn/tensor.hpp"

namespace fccdn {

/// A named, trainable tensor. Weight-shared blocks hold the same
/// shared_ptr<Parameter>, so a write through one alias is visible
/// through every other.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape), trainable(train) {}

  void zero_grad() { grad.fill(0.0); }
};

using ParamPtr = std::shared_ptr<Parameter>;

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One entry of the autodiff tape. `backprop` reads this node's grad and
/// accumulates into the parents' grads (and into the bound parameter's
/// grad for leaves).
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_ready = false;
  ParamPtr param;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad() {
    if (!grad_ready) {
      grad = Tensor(value.shape);
      grad_ready = true;
    }
    return grad;
  }
};

/// Handle to a tape node. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor t, bool requires_grad = false);
  static Var leaf(const ParamPtr& p);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const std::vector<int>& shape() const { return node_->value.shape; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& grad() const { return node_->grad; }
  NodePtr node() const { return node_; }

  /// Reverse pass from a scalar. Accumulates into Parameter::grad.
  void backward() const;

  /// Detached copy of the value: a fresh constant leaf with no history.
  Var detach() const { return Var(node_->value, false); }

  double item() const {
    if (node_->value.numel() != 1) throw std::runtime_error("item(): tensor is not scalar");
    return node_->value.data[0];
  }

  static Var from_node(NodePtr n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  NodePtr node_;
};

/// While any NoGradGuard is alive, ops build value-only nodes (no parents,
/// no backprop closures), so intermediates free as soon as they go out of
/// scope. Used for validation and inference.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace fccdn
