#include "tsrm/autodiff.hpp"

#include "tsrm/error.hpp"

namespace tsrm {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value_of(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad_of(id_); }

bool Var::has_grad() const { return tape_ && !tape_->grad_of(id_).empty(); }

const Tensor& Var::grad() const {
  if (!has_grad()) throw ContractError("no gradient recorded for this value");
  return tape_->grad_of(id_);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor(), requires_grad && grad_enabled_, nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = bound_params_.find(&p); it != bound_params_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, Tensor(), p.trainable && grad_enabled_, &p, nullptr});
  bound_params_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(const Var& v) const {
  if (v.tape_ != this) throw ContractError("operands recorded on different tapes");
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const auto& v : inputs) {
    check_owner(v);
    needs = needs || nodes_[v.id_].requires_grad;
  }
  if (consumed_) throw ContractError("tape already consumed by backward");
  nodes_.push_back(Node{std::move(value), Tensor(), needs, nullptr, needs ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool needs = false;
  for (const auto& v : inputs) {
    check_owner(v);
    needs = needs || nodes_[v.id_].requires_grad;
  }
  if (consumed_) throw ContractError("tape already consumed by backward");
  nodes_.push_back(Node{std::move(value), Tensor(), needs, nullptr, needs ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_sink(const Var& v) {
  check_owner(v);
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return &n.grad;
}

void Tape::backward(const Var& loss) {
  check_owner(loss);
  if (consumed_) throw ContractError("backward called twice on the same tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  nodes_[loss.id_].grad = Tensor(loss.shape(), 1);

  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(n.grad, *this);
    if (n.param) {
      Parameter& p = *n.param;
      if (p.grad.empty()) {
        p.grad = n.grad;
      } else {
        auto dst = p.grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }
}

}  // namespace tsrm
