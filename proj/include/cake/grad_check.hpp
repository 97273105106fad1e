// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.

#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cake/tensor.hpp"

namespace cake {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  /// Coordinates that sit on (or within eps of) a kink, where one-sided
  /// derivatives disagree. They are reported, not failed.
  std::size_t excluded = 0;

  void merge(const GradCheckReport& other);
};

/// Relative error uses max(|analytic|, |numeric|, kGradScaleFloor) as the
/// denominator so that coordinates with vanishing gradient are compared on an
/// absolute scale instead of dividing noise by noise.
inline constexpr double kGradScaleFloor = 1e-2;

/// Checks d f / d x for every coordinate of every tensor in `wrt`. The tensors
/// must be leaves that `f` reads; they are perturbed in place and restored.
template <class T>
GradCheckReport grad_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> wrt,
                           double eps = 1e-3, double tol = 1e-4);

/// Single-input form: f is evaluated on x and its perturbations.
template <class T>
GradCheckReport grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                           double eps = 1e-3, double tol = 1e-4);

}  // namespace cake
