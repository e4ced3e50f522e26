#include "attune/graph.hpp"

#include "attune/errors.hpp"

ATTUNE_NAMESPACE_BEGIN

const Tensor& Var::value() const {
  if (!graph_) throw ContractError("value() on an unbound Var");
  return graph_->nodes_[id_].value;
}

Graph& Var::graph() const {
  if (!graph_) throw ContractError("graph() on an unbound Var");
  return *graph_;
}

const Tensor& BackwardContext::input(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].value;
}

bool BackwardContext::needs_grad(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].needs_grad;
}

Tensor& BackwardContext::input_grad(std::size_t i) {
  auto& in = graph_.nodes_[graph_.nodes_[node_].inputs.at(i)];
  if (in.grad.empty()) in.grad = Tensor::zeros_like(in.value);
  return in.grad;
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.graph_ != this) throw ContractError(std::string(op) + ": input belongs to another graph");
    n.inputs.push_back(v.id_);
    n.needs_grad = n.needs_grad || nodes_[v.id_].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var root) {
  if (root.graph_ != this) throw ContractError("backward: root belongs to another graph");
  Node& r = nodes_[root.id_];
  if (r.value.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_to_string(r.value.shape()));
  }
  if (swept_) throw ContractError("backward: graph was already swept");
  swept_ = true;
  if (!r.needs_grad) return;
  r.grad = Tensor(r.value.shape(), Real(1));

  for (std::size_t id = root.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
    BackwardContext ctx(*this, id);
    ctx.grad_output_ = &n.grad;
    ctx.output_ = &n.value;
    n.backward(ctx);
  }
}

const Graph::Node& Graph::node(Var v) const {
  if (v.graph_ != this) throw ContractError("Var belongs to another graph");
  return nodes_[v.id_];
}

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return Tensor::zeros_like(n.value);
  return n.grad;
}

bool Graph::requires_grad(Var v) const { return node(v).needs_grad; }

const char* Graph::op_name(Var v) const { return node(v).op; }

ATTUNE_NAMESPACE_END
