#include "shaspec/tape.hpp"

#include <algorithm>

namespace shaspec {

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericalError("non-finite constant recorded on tape");
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& param) {
  if (!param.value.all_finite()) throw NumericalError("parameter '" + param.name + "' holds a non-finite value");
  Node n;
  n.op = "param:" + param.name;
  n.value = param.value;
  n.param = &param;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
  if (!value.all_finite()) throw NumericalError(std::string("operation '") + op + "' produced a non-finite value");
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.parents.reserve(parents.size());
  for (const auto& p : parents) {
    check_owned(p);
    n.parents.push_back(p.id());
    n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(const Var& v) const {
  if (&v.tape() != this || v.id() >= nodes_.size()) throw ContractError("variable does not belong to this tape");
}

const Tensor& Tape::grad_of_node(std::size_t id) const {
  const auto& n = nodes_.at(id);
  if (n.grad.empty()) throw ContractError("node " + std::to_string(id) + " has no gradient");
  return n.grad;
}

Tensor& Tape::grad_of(const Var& v) {
  auto& n = nodes_.at(v.id());
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  check_owned(root);
  if (root.value().size() != 1)
    throw ContractError("backward() needs a scalar root, got shape " + shape_to_string(root.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  nodes_[root.id()].grad = Tensor(nodes_[root.id()].value.shape(), 1.0);

  for (std::size_t k = root.id() + 1; k-- > 0;) {
    auto& n = nodes_[k];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.param != nullptr) {
      auto& g = n.param->grad;
      if (g.shape() != n.value.shape()) g = Tensor(n.value.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      continue;
    }
    if (n.backward) {
      // The rule may allocate parent grads, which never reallocates nodes_.
      n.backward(*this, n.grad, n.value);
    }
  }
}

std::vector<Parameter*> Tape::parameters() const {
  std::vector<Parameter*> out;
  for (const auto& n : nodes_)
    if (n.param && std::find(out.begin(), out.end(), n.param) == out.end()) out.push_back(n.param);
  return out;
}

}  // namespace shaspec
