#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tsrm/tensor.hpp"

namespace tsrm {

// A named trainable array. `grad` stays empty until a backward pass reaches
// the parameter; frozen parameters (trainable == false) never receive one.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad = Tensor(); }
};

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool has_grad() const;
  // Gradient after Tape::backward; throws ContractError if none was produced.
  const Tensor& grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records one forward pass. Nodes are appended in execution order, so the
// recording is topologically sorted by construction. backward() may run once.
//
// A tape built with grad_enabled == false only computes values; nothing
// requires grad and no backward closures are kept.
class Tape {
 public:
  // Receives the gradient of the node's output; accumulates into inputs.
  using BackwardFn = std::function<void(const Tensor& grad_out, Tape& tape)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  // Leaf bound to a Parameter; its gradient is accumulated into param.grad on
  // backward. Binding the same Parameter twice returns the same Var.
  Var param(Parameter& p);

  // Appends an op result. `fn` is dropped when no input requires grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  void backward(const Var& loss);
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of `v` for accumulation, or nullptr when v needs no grad.
  Tensor* grad_sink(const Var& v);

  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad_of(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  void check_owner(const Var& v) const;

  bool grad_enabled_;
  bool consumed_ = false;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_params_;
};

}  // namespace tsrm
