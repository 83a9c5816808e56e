#include "sadkit/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace sadkit {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {

void check_shape(const Shape& shape, Index count) {
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  if (numel(shape) != count) {
    throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(count));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array values, bool requires_grad)
    : node_(std::make_shared<detail::Node<Scalar>>()) {
  check_shape(shape, values.size());
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  Array v = Array::Zero(numel(shape));
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::constant(Shape shape, Scalar value, bool requires_grad) {
  Array v = Array::Constant(numel(shape), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return constant({1}, value, requires_grad);
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int i) const {
  const int r = rank();
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) {
    throw ShapeError("dimension " + std::to_string(i) + " out of range for " + to_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(k)];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
typename Tensor<Scalar>::Array Tensor<Scalar>::grad() const {
  if (node_->grad.size() == 0) return Array::Zero(node_->value.size());
  return node_->grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  auto node = std::make_shared<detail::Node<Scalar>>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshape(Shape shape) const {
  check_shape(shape, size());
  Tensor self = *this;
  return make_op_result<Scalar>(std::move(shape), node_->value, {self},
                                [self](const Array& g) { self.accumulate_grad(g); });
}

template <typename Scalar>
Tensor<Scalar> make_op_result(Shape shape, ArrayX<Scalar> value,
                              std::initializer_list<Tensor<Scalar>> inputs,
                              std::function<void(const ArrayX<Scalar>&)> backward) {
  auto node = std::make_shared<detail::Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  Tape<Scalar>* tape = Tape<Scalar>::active();
  const bool needs = tape != nullptr &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor<Scalar>& t) {
                       return t.defined() && t.requires_grad();
                     });
  if (needs) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
void Tape<Scalar>::backward(const Tensor<Scalar>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  if (!loss.is_leaf() &&
      std::find(nodes_.rbegin(), nodes_.rend(), loss.node()) == nodes_.rend()) {
    throw std::logic_error("backward: loss was not recorded on this tape");
  }
  for (auto& n : nodes_) n->grad.resize(0);
  loss.node()->grad_buffer()[0] += Scalar(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = **it;
    if (n.grad.size() != 0 && n.backward) n.backward(n.grad);
  }
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Tape<Scalar>* tape = Tape<Scalar>::active();
  if (tape == nullptr) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor<float> make_op_result(Shape, ArrayX<float>, std::initializer_list<Tensor<float>>,
                                      std::function<void(const ArrayX<float>&)>);
template Tensor<double> make_op_result(Shape, ArrayX<double>, std::initializer_list<Tensor<double>>,
                                       std::function<void(const ArrayX<double>&)>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace sadkit
