#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sadkit {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
class Tensor;
template <typename Scalar>
class Tape;

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  ArrayX<Scalar> value;
  // Empty until the first accumulation; an empty grad reads as zero.
  ArrayX<Scalar> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::function<void(const ArrayX<Scalar>&)> backward;

  ArrayX<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = ArrayX<Scalar>::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor participating in reverse-mode differentiation.
///
/// A Tensor is a cheap handle; copies share the same node. Values are
/// immutable once an op has consumed them, except through value_mut() on
/// leaves (optimizer updates).
template <typename Scalar>
class Tensor {
 public:
  using Array = ArrayX<Scalar>;
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Tensor() = default;
  Tensor(Shape shape, Array values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  /// Extent of dimension `i`; negative indices count from the back.
  Index dim(int i) const;
  Index size() const { return node_->value.size(); }

  const Array& value() const { return node_->value; }
  Array& value_mut() { return node_->value; }
  const Scalar* data() const { return node_->value.data(); }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return node_->grad.size() != 0; }
  /// Accumulated gradient; all zeros when nothing reached this tensor.
  Array grad() const;
  void zero_grad() { node_->grad.resize(0); }

  /// Adds `g` into the gradient buffer. No-op when grad is not required.
  template <typename Derived>
  void accumulate_grad(const Eigen::ArrayBase<Derived>& g) const {
    if (!node_->requires_grad) return;
    node_->grad_buffer() += g;
  }

  /// Same values, cut from the tape.
  Tensor detach() const;
  /// Differentiable view with a new shape of the same element count.
  Tensor reshape(Shape shape) const;

  const NodePtr& node() const { return node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  template <typename S>
  friend Tensor<S> make_op_result(Shape, ArrayX<S>, std::initializer_list<Tensor<S>>,
                                  std::function<void(const ArrayX<S>&)>);

  NodePtr node_;
};

/// Ordered record of executed ops on one thread.
///
/// Ops record onto the tape activated by a TapeScope on the calling thread.
/// With no active tape, results do not require grad (inference mode).
template <typename Scalar>
class Tape {
 public:
  using NodePtr = typename Tensor<Scalar>::NodePtr;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(NodePtr node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Populates grads of every requires_grad tensor reachable from `loss`.
  /// Intermediate grads are reset first; leaf grads accumulate across calls.
  void backward(const Tensor<Scalar>& loss);

  static Tape* active() { return active_; }

 private:
  template <typename S>
  friend class TapeScope;

  std::vector<NodePtr> nodes_;
  static thread_local Tape* active_;
};

template <typename Scalar>
thread_local Tape<Scalar>* Tape<Scalar>::active_ = nullptr;

/// Activates a tape (or none, for nullptr) on this thread for its lifetime.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>* tape) : previous_(Tape<Scalar>::active_) {
    Tape<Scalar>::active_ = tape;
  }
  explicit TapeScope(Tape<Scalar>& tape) : TapeScope(&tape) {}
  ~TapeScope() { Tape<Scalar>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

template <typename Scalar>
class NoGrad : public TapeScope<Scalar> {
 public:
  NoGrad() : TapeScope<Scalar>(nullptr) {}
};

/// Builds an op output. It requires grad, and is recorded on the active tape,
/// iff some input requires grad and a tape is active.
template <typename Scalar>
Tensor<Scalar> make_op_result(Shape shape, ArrayX<Scalar> value,
                              std::initializer_list<Tensor<Scalar>> inputs,
                              std::function<void(const ArrayX<Scalar>&)> backward);

/// Convenience: backward on the active tape.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sadkit
