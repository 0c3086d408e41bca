#include "roadenkf/tape.hpp"

#include "roadenkf/error.hpp"

namespace roadenkf::ad {

Var Tape::leaf(Tensor value) {
  auto ptr = std::make_shared<const Tensor>(std::move(value));
  nodes_.push_back(Node{ptr->shape(), ptr->kind(), {}, {}, true});
  return Var(std::move(ptr), this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(const Var& v) {
  nodes_.push_back(Node{v.shape(), v.kind(), {}, {}, true});
  return Var(v.value_ptr(), this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(std::shared_ptr<const Tensor> value, std::span<const Var* const> inputs, BackwardFn fn) {
  Node node{value->shape(), value->kind(), {}, std::move(fn), false};
  node.parents.reserve(inputs.size());
  for (const Var* in : inputs) {
    if (in->tape() != nullptr && in->tape() != this) {
      throw ContractError("op mixes variables from different tapes");
    }
    node.parents.push_back(in->tape() == this ? in->node() : -1);
  }
  nodes_.push_back(std::move(node));
  return Var(std::move(value), this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(const Var& output) {
  if (output.tape() != this) throw ContractError("backward: output is not on this tape");
  if (output.value().numel() != 1 || output.kind() != Kind::real) {
    throw ContractError("backward: output must be a real scalar, got " + shape_str(output.shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  has_grad_.assign(nodes_.size(), 0);

  const auto out = static_cast<std::size_t>(output.node());
  grads_[out] = Tensor::full(nodes_[out].shape, 1.0);
  has_grad_[out] = 1;

  std::vector<Tensor*> refs;
  for (std::size_t i = out + 1; i-- > 0;) {
    if (!has_grad_[i]) continue;
    Node& node = nodes_[i];
    if (node.leaf) continue;
    refs.assign(node.parents.size(), nullptr);
    bool any = false;
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const int p = node.parents[k];
      if (p < 0) continue;
      if (!has_grad_[p]) {
        grads_[p] = Tensor(nodes_[p].shape, nodes_[p].kind);
        has_grad_[p] = 1;
      }
      refs[k] = &grads_[p];
      any = true;
    }
    if (any && node.backward) node.backward(grads_[i], refs);
    // interior gradients are no longer needed once propagated
    grads_[i] = Tensor();
    has_grad_[i] = 0;
  }
}

const Tensor* Tape::grad(const Var& v) const {
  if (v.tape() != this || v.node() < 0) return nullptr;
  const auto i = static_cast<std::size_t>(v.node());
  if (i >= has_grad_.size() || !has_grad_[i]) return nullptr;
  return &grads_[i];
}

Tensor Tape::grad_or_zeros(const Var& v) const {
  if (const Tensor* g = grad(v)) return *g;
  return Tensor(v.shape(), v.kind());
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  has_grad_.clear();
}

Var make_result(Tensor value, std::initializer_list<const Var*> inputs, BackwardFn fn) {
  Tape* tape = nullptr;
  for (const Var* in : inputs) {
    if (in->tape() != nullptr) {
      tape = in->tape();
      break;
    }
  }
  if (tape == nullptr) return Var(std::move(value));
  return tape->record(std::make_shared<const Tensor>(std::move(value)),
                      std::span<const Var* const>(inputs.begin(), inputs.size()), std::move(fn));
}

}  // namespace roadenkf::ad
