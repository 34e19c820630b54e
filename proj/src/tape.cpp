#include <stdexcept>

#include "dain/autodiff.hpp"

namespace dain::ad {

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Head: return "head";
    case ParamGroup::Classifier: return "classifier";
  }
  return "?";
}

Parameter::Parameter(std::string n, Tensor v, ParamGroup g)
    : name(std::move(n)), value(std::move(v)), grad(value.shape(), value.dtype()), group(g) {}

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->nodes_.at(id_).value;
}

bool Var::requires_grad() const { return tape_ && tape_->nodes_.at(id_).requires_grad; }

Var Tape::constant(Tensor t) {
  Node n;
  n.op = "const";
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor t) {
  Node n;
  n.op = "leaf";
  n.value = std::move(t);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.op = "param";
  n.value = p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_ && p.requires_grad;
  nodes_.push_back(std::move(n));
  param_nodes_[&p] = nodes_.size() - 1;
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  if (!value.all_finite()) throw NumericError("non-finite value produced by " + std::string(op));
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  bool needs = false;
  n.inputs.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (v.tape() != this) throw std::logic_error(std::string(op) + ": inputs recorded on a different tape");
    n.inputs.push_back(v.id());
    needs = needs || nodes_[v.id()].requires_grad;
  }
  n.requires_grad = grad_enabled_ && needs;
  if (n.requires_grad) n.fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), n.value.dtype());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::logic_error("backward: loss recorded on a different tape");
  if (loss.value().numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  visits_ = 0;
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id()).fill(1.0);

  std::vector<Tensor*> in_grads;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param) {
      n.param->grad.add_(n.grad);
      continue;
    }
    if (!n.fn) continue;
    in_grads.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k)
      if (nodes_[n.inputs[k]].requires_grad) in_grads[k] = &grad_buffer(n.inputs[k]);
    n.fn(n.grad, in_grads);
    ++visits_;
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape(), n.value.dtype());
  return n.grad;
}

}  // namespace dain::ad
