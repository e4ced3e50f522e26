#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "attune/tensor.hpp"

ATTUNE_NAMESPACE_BEGIN

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Graph& graph() const;
  std::size_t id() const noexcept { return id_; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// What an op's adjoint sees while the graph is swept backwards.
class BackwardContext {
 public:
  const Tensor& grad_output() const { return *grad_output_; }
  const Tensor& output() const { return *output_; }
  const Tensor& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  /// Accumulator for the gradient of input i, zero-initialised on first use.
  Tensor& input_grad(std::size_t i);

 private:
  friend class Graph;
  BackwardContext(Graph& graph, std::size_t node) : graph_(graph), node_(node) {}

  Graph& graph_;
  std::size_t node_;
  const Tensor* grad_output_ = nullptr;
  const Tensor* output_ = nullptr;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the insertion order is a
/// topological order. A graph is built per forward pass, swept backwards
/// once, and discarded. Not thread-safe; replicas may run on other threads.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf node; gradients are accumulated for it when requires_grad is set.
  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var variable(Tensor value) { return leaf(std::move(value), true); }

  /// Appends an op node. The node needs a gradient iff any input does.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op);

  /// Accumulates d(root)/d(node) for every node that needs a gradient.
  /// The root must be scalar; a graph can be swept only once.
  void backward(Var root);

  /// Gradient of the last backward root w.r.t. v; zeros if v was not reached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;
  const char* op_name(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class Var;
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const char* op = "leaf";
    bool needs_grad = false;
  };

  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  bool swept_ = false;
};

ATTUNE_NAMESPACE_END
