// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by operator implementations for wiring results into the
// active tape.

#pragma once

#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "cake/autograd.hpp"
#include "cake/tensor.hpp"

namespace cake::detail {

/// Gradient accumulation target for an input, or nullptr when the input does
/// not take gradients.
template <class T>
T* grad_target(const BasicTensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  auto* impl = t.impl();
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
  return impl->grad.data();
}

/// Builds the output tensor and, when recording, registers `backward_fn`.
/// `backward_fn(const std::vector<T>& gout, const std::vector<T>& out)` receives
/// the output gradient and values and accumulates into whichever captured
/// inputs take gradients.
template <class T, class Fn>
BasicTensor<T> finish(Shape shape, std::vector<T> data, std::initializer_list<BasicTensor<T>> inputs,
                      Fn&& backward_fn) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any || !grad_recording()) return out;

  auto impl = out.impl_ptr();
  impl->requires_grad = true;
  impl->is_leaf = false;
  GradTape::current()->record([impl] { impl->grad.clear(); },
                              [impl, fn = std::forward<Fn>(backward_fn)]() mutable {
                                if (impl->grad.empty()) return;
                                fn(impl->grad, impl->data);
                              });
  return out;
}

/// Variant for operators with a runtime-sized input list.
template <class T, class Fn>
BasicTensor<T> finish_n(Shape shape, std::vector<T> data, const std::vector<BasicTensor<T>>& inputs,
                        Fn&& backward_fn) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any || !grad_recording()) return out;

  auto impl = out.impl_ptr();
  impl->requires_grad = true;
  impl->is_leaf = false;
  GradTape::current()->record([impl] { impl->grad.clear(); },
                              [impl, fn = std::forward<Fn>(backward_fn)]() mutable {
                                if (impl->grad.empty()) return;
                                fn(impl->grad, impl->data);
                              });
  return out;
}

}  // namespace cake::detail
