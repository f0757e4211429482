#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "shaspec/tensor.hpp"

namespace shaspec {

/// A trainable tensor: value plus an accumulated gradient of the same shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  Shape shape() const { return value().shape(); }
  /// Gradient of the last backward() root with respect to this node.
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of a forward pass. Nodes are topologically ordered by
/// construction: every parent id is smaller than its child's id.
///
/// A tape is confined to one thread. Parameters referenced by a tape must
/// outlive it.
class Tape {
 public:
  /// Adds a node's gradient contribution to its parents. Receives the tape
  /// (for grad_of / value_of), the node's output gradient and its output value.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records a value that carries no gradient.
  Var constant(Tensor value);
  /// Records a parameter leaf; backward() accumulates into param.grad.
  Var param(Parameter& param);

  /// Records the output of an operation. Throws NumericalError when the value
  /// contains NaN or Inf, naming `op`.
  Var record(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward);

  /// Reverse sweep from a single-element root. Intermediate gradients are
  /// reset on every call; parameter gradients accumulate.
  void backward(Var root);

  const Tensor& value_of(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad_of_node(std::size_t id) const;
  /// Mutable gradient buffer of a parent, allocated on first use. Only valid
  /// inside a backward rule.
  Tensor& grad_of(const Var& v);
  bool needs_grad(const Var& v) const { return nodes_.at(v.id()).needs_grad; }

  std::size_t size() const { return nodes_.size(); }
  /// Parameters recorded on this tape, in first-use order, without repeats.
  std::vector<Parameter*> parameters() const;
  const std::vector<std::size_t>& parents_of(std::size_t id) const { return nodes_.at(id).parents; }
  const std::string& op_of(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  void check_owned(const Var& v) const;

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value_of(id_); }
inline const Tensor& Var::grad() const { return tape_->grad_of_node(id_); }

}  // namespace shaspec
