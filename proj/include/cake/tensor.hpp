// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with optional gradient storage.
//
// The scalar type is a template parameter so the same operator code runs in
// float32 (training, inference) and float64 (finite-difference checks).

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cake {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Violated precondition that is not a shape problem (bad label, non-scalar
/// loss, empty sequence, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static BasicTensor zeros(Shape shape);
  static BasicTensor ones(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Parameters are the only tensors mutated after creation (optimizer steps,
  // EMA, checkpoint loads, finite-difference probes).
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T operator[](std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros of the right size if nothing has accumulated yet.
  std::vector<T> grad() const;
  std::vector<T>& grad_buffer();
  void zero_grad() { impl_->grad.clear(); }

  /// Copy of the values with no gradient history.
  BasicTensor detach() const;

  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <class To, class From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& src) {
  std::vector<To> out(src.data().begin(), src.data().end());
  return BasicTensor<To>(src.shape(), std::move(out), src.requires_grad());
}

}  // namespace cake
