#pragma once

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "codats/tensor.hpp"

namespace codats {

// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

// Reverse-mode tape. Nodes are appended in forward order, so parents always
// precede children and a single reverse sweep is a valid topological order.
// One tape is owned by one training step and is not shared across threads.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Var leaf(Tensor<T> value) { return push(std::move(value), "leaf"); }

  Var push(Tensor<T> value, const char* op_name) {
    if (check_finite_ && !value.all_finite()) {
      throw std::runtime_error(std::string(op_name) + ": non-finite value produced");
    }
    nodes_.push_back(Node{std::move(value), nullptr});
    return Var{nodes_.size() - 1};
  }

  // Backward rules are attached after push so they can capture the output id.
  void set_backward(Var v, BackwardFn f) {
    check(v);
    nodes_[v.id].backward = std::move(f);
  }

  const Tensor<T>& val(Var v) const { return node(v).value; }

  std::size_t size() const { return nodes_.size(); }

  bool has_grad(Var v) const {
    check(v);
    return v.id < grads_.size() && grads_[v.id].has_value();
  }

  // Gradient accumulated at v; zero-initialized on first access.
  Tensor<T>& grad(Var v) {
    check(v);
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& slot = grads_[v.id];
    if (!slot.has_value()) slot.emplace(Tensor<T>::zeros(nodes_[v.id].value.shape));
    return *slot;
  }

  // Adds g to the gradient at v. Shapes must match the node value.
  void accumulate(Var v, const Tensor<T>& g) {
    Tensor<T>& dst = grad(v);
    if (!dst.same_shape(g)) {
      throw std::invalid_argument("backward: gradient shape " + shape_str(g.shape) +
                                  " does not match node shape " + shape_str(dst.shape));
    }
    for (std::size_t i = 0; i < g.numel(); ++i) dst.values[i] += g.values[i];
    if (check_finite_ && !dst.all_finite()) {
      throw std::runtime_error("backward: non-finite gradient");
    }
  }

  // Reverse sweep from a scalar loss. Gradients accumulate additively at
  // shared nodes; nodes that do not influence the loss are skipped.
  void backward(Var loss) {
    const Tensor<T>& lv = val(loss);
    if (lv.numel() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(lv.shape));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grad(loss).values[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (grads_[i].has_value() && nodes_[i].backward) nodes_[i].backward(*this);
    }
  }

  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

 private:
  struct Node {
    Tensor<T> value;
    BackwardFn backward;  // null for leaves
  };

  void check(Var v) const {
    if (v.id >= nodes_.size()) throw std::invalid_argument("tape: node not on tape");
  }

  const Node& node(Var v) const {
    check(v);
    return nodes_[v.id];
  }

  // deques keep value and gradient references stable while nodes are appended
  std::deque<Node> nodes_;
  std::deque<std::optional<Tensor<T>>> grads_;
  bool check_finite_ = false;
};

}  // namespace codats
