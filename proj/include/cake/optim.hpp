// SPDX-License-Identifier: Apache-2.0
//
// Parameter update rules. Both optimizers read each parameter's accumulated
// gradient, update the values in place and leave the gradient untouched;
// callers zero gradients between steps.

#pragma once

#include <cstddef>
#include <vector>

#include "cake/tensor.hpp"

namespace cake {

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Heavy-ball SGD: v <- mu * v + (g + wd * p); p <- p - lr * v.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdOptions opts);
  void step();
  void zero_grad();
  void set_lr(double lr) { opts_.lr = lr; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  SgdOptions opts_;
  std::vector<std::vector<float>> velocity_;
};

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions opts);
  void step();
  void zero_grad();
  void set_lr(double lr) { opts_.lr = lr; }
  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Sum of squared gradient entries over `params`, then scales every gradient
/// by min(1, max_norm / norm). Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

}  // namespace cake
