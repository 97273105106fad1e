// SPDX-License-Identifier: Apache-2.0

#include "cake/tensor.hpp"

#include <sstream>

namespace cake {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  impl_ = std::make_shared<TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <class T>
BasicTensor<T> BasicTensor<T>::ones(Shape shape) {
  return full(std::move(shape), T(1));
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  auto n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{1}, std::vector<T>{value});
}

template <class T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <class T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <class T>
std::vector<T> BasicTensor<T>::grad() const {
  if (impl_->grad.empty()) return std::vector<T>(numel(), T(0));
  return impl_->grad;
}

template <class T>
std::vector<T>& BasicTensor<T>::grad_buffer() {
  if (impl_->grad.empty()) impl_->grad.assign(numel(), T(0));
  return impl_->grad;
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(impl_->shape, impl_->data, false);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace cake
