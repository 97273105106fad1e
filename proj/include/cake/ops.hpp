// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operators. Every reduction sums in a fixed order
// (row-major over the reduced indices), so results are bit-reproducible.

#pragma once

#include <cstdint>
#include <vector>

#include "cake/tensor.hpp"

namespace cake {

enum class Elementwise { add, sub, mul, sigmoid, tanh, relu, exp, log, scale, broadcast_mul };

/// Right-aligned broadcast of two shapes; extents must match or be 1.
Shape broadcast_shape(const Shape& a, const Shape& b);

/// Dispatches on `kind`. Binary kinds need `b`; `scale` multiplies by `factor`.
template <class T>
BasicTensor<T> elementwise(Elementwise kind, const BasicTensor<T>& a, const BasicTensor<T>* b = nullptr,
                           T factor = T(1));

template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <class T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value);
template <class T> BasicTensor<T> sigmoid(const BasicTensor<T>& a);
template <class T> BasicTensor<T> tanh(const BasicTensor<T>& a);
template <class T> BasicTensor<T> relu(const BasicTensor<T>& a);
template <class T> BasicTensor<T> exp(const BasicTensor<T>& a);
template <class T> BasicTensor<T> log(const BasicTensor<T>& a);
/// x^p for x >= 0; the derivative at x = 0 is taken as 0 for p > 1.
template <class T> BasicTensor<T> pow(const BasicTensor<T>& a, T p);

/// Sum of all elements, shape (1).
template <class T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& a);

template <class T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> transpose(const BasicTensor<T>& a);
/// x[N,in] * w[out,in]^T + bias[out]; `bias` may be undefined.
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);

template <class T> BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);
template <class T> BasicTensor<T> log_softmax(const BasicTensor<T>& x, std::size_t axis);

template <class T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
/// Concatenation along `axis`; all other extents must agree.
template <class T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
/// Slice `index` of axis 0, dropping that axis (rank-1 input gives shape (1)).
template <class T> BasicTensor<T> select(const BasicTensor<T>& a, std::size_t index);
/// Rows [begin, end) of axis 0.
template <class T> BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end);
/// Stacks equal-shape tensors along a new leading axis.
template <class T> BasicTensor<T> stack(const std::vector<BasicTensor<T>>& parts);
/// out[n] = x[n, index[n]] for x of shape [N,C].
template <class T> BasicTensor<T> pick(const BasicTensor<T>& x, const std::vector<std::size_t>& index);
/// Row-wise log(sum_j mask[n,j] * exp(x[n,j])) for x of shape [N,M]. Every
/// row needs at least one selected entry; unselected entries get exactly zero
/// gradient.
template <class T>
BasicTensor<T> masked_logsumexp(const BasicTensor<T>& x, const std::vector<std::uint8_t>& mask);
/// Rows of x[N,D] scaled to unit L2 norm.
template <class T> BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x);

}  // namespace cake
