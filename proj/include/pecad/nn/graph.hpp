#pragma once

#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "pecad/nn/tensor.hpp"

namespace pecad::nn {

// Handle to a node recorded on a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops append nodes in execution order; backward() walks
// them in reverse, so every node's gradient is complete before it is used.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  explicit Graph(bool training = false, bool grad_enabled = true)
      : training_(training), grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }
  bool grad_enabled() const { return grad_enabled_; }

  // Input that gradients may still be requested for (e.g. Grad-CAM targets).
  Var input(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && requires_grad;
    return push(std::move(n));
  }

  Var parameter(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.needs_grad = grad_enabled_;
    return push(std::move(n));
  }

  Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  Var record(Tensor<T> value, std::span<const Var> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
      for (Var p : parents) n.needs_grad = n.needs_grad || nodes_.at(p.id).needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? n.param->value : n.value;
  }

  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Gradient accumulator for v, zero-allocated on first access.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    Tensor<T>& g = n.param ? n.param->grad : n.grad;
    if (g.empty()) g = Tensor<T>(value(v).shape());
    return g;
  }

  bool has_grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return !(n.param ? n.param->grad.empty() : n.grad.empty());
  }

  // Seeds d(root)/d(root) = 1 for a scalar root.
  void backward(Var root) {
    if (value(root).size() != 1) {
      throw Error(ErrorKind::kShape, "backward() needs a scalar root, got " +
                                         shape_str(value(root).shape()));
    }
    Tensor<T> seed(value(root).shape(), T{1});
    backward(root, seed);
  }

  void backward(Var root, const Tensor<T>& seed) {
    expect_shape(seed.shape(), value(root).shape(), "backward seed");
    Tensor<T>& g = grad(root);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      // No nodes are appended during backward, so n stays addressable.
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool training_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace pecad::nn
