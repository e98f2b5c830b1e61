#include "astra/tape.hpp"

#include "astra/error.hpp"

namespace astra {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), std::nullopt, nullptr, requires_grad && record_});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  if (record_) {
    for (const Var& p : parents) {
      if (&p.tape() != this) throw ContractError("operands recorded on different tapes");
      needs = needs || p.requires_grad();
    }
  }
  nodes_.push_back(Node{std::move(value), std::nullopt, needs ? std::move(backward) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Tensor& Tape::grad(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad) {
    static thread_local Tensor empty;
    empty = Tensor(n.value.rows(), n.value.cols(), Precision::f64);
    return empty;
  }
  return *n.grad;
}

void Tape::accumulate(int id, const Tensor& g) { accumulate_scaled(id, g, 1.0); }

void Tape::accumulate_scaled(int id, const Tensor& g, double scale) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (!n.value.same_shape(g)) {
    throw DimensionError("gradient shape " + g.shape_string() + " does not match value " +
                         n.value.shape_string());
  }
  if (!n.grad) n.grad = Tensor(g.rows(), g.cols(), Precision::f64);
  auto dst = n.grad->values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw ContractError("backward root belongs to another tape");
  if (root.value().size() != 1) {
    throw ContractError("backward requires a scalar root, got " + root.value().shape_string());
  }
  if (!record_) throw ContractError("backward on a non-recording tape");
  accumulate(root.id(), Tensor(1, 1, {1.0}, Precision::f64));
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || !n.grad) continue;
    // Copy: the callback may grow nodes_ only in pathological use, but it does
    // accumulate into other nodes of the same vector.
    const Tensor g = *n.grad;
    n.backward(*this, g);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.reset();
}

Tensor Tape::next_stop_gradient(const Tensor& computed) {
  Tensor out = computed;
  if (sg_replay_) {
    if (sg_cursor_ >= sg_replay_->size()) {
      throw ContractError("stop-gradient replay exhausted");
    }
    out = (*sg_replay_)[sg_cursor_++];
    if (!out.same_shape(computed)) throw DimensionError("stop-gradient replay shape mismatch");
  }
  sg_record_.push_back(out);
  return out;
}

void Tape::set_stop_gradient_replay(std::vector<Tensor> values) {
  sg_replay_ = std::move(values);
  sg_cursor_ = 0;
}

}  // namespace astra
