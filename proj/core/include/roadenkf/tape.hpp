#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "roadenkf/tensor.hpp"

namespace roadenkf::ad {

class Tape;

/// A tensor value, optionally registered on a tape. Vars without a tape are
/// constants: ops on constants compute values without recording anything.
class Var {
 public:
  Var() = default;
  Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}  // NOLINT: implicit constant

  const Tensor& value() const { return *value_; }
  const std::shared_ptr<const Tensor>& value_ptr() const noexcept { return value_; }
  const Shape& shape() const { return value_->shape(); }
  Kind kind() const { return value_->kind(); }
  bool defined() const noexcept { return static_cast<bool>(value_); }

  bool requires_grad() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  int node() const noexcept { return node_; }

 private:
  friend class Tape;
  Var(std::shared_ptr<const Tensor> value, Tape* tape, int node)
      : value_(std::move(value)), tape_(tape), node_(node) {}

  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Gradient buffers of an op's inputs; nullptr for inputs that are constants.
using GradRefs = std::span<Tensor* const>;
using BackwardFn = std::function<void(const Tensor& grad_out, GradRefs grads_in)>;

/// Append-only record of differentiable ops. Node order is topological;
/// backward visits nodes in exact reverse order. Single-owner, not thread-safe.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a differentiable input.
  Var leaf(Tensor value);
  Var leaf(const Var& v);

  /// Records an op output. Inputs that are constants get a null gradient ref.
  Var record(std::shared_ptr<const Tensor> value, std::span<const Var* const> inputs, BackwardFn fn);

  /// Reverse sweep from a scalar output. Clears any previous gradients first,
  /// so repeated calls give identical results.
  void backward(const Var& output);

  /// Gradient of a node from the last backward sweep (nullptr if none reached it).
  const Tensor* grad(const Var& v) const;
  /// Gradient, or zeros of the value's shape if the node received none.
  Tensor grad_or_zeros(const Var& v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  void reset();

 private:
  struct Node {
    Shape shape;
    Kind kind;
    std::vector<int> parents;
    BackwardFn backward;
    bool leaf = false;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> has_grad_;
};

/// Builds an op result: records on the inputs' tape if any input requires
/// grad, otherwise returns a constant.
Var make_result(Tensor value, std::initializer_list<const Var*> inputs, BackwardFn fn);

}  // namespace roadenkf::ad
