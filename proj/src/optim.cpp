// SPDX-License-Identifier: Apache-2.0

#include "cake/optim.hpp"

#include <cmath>

namespace cake {

Sgd::Sgd(std::vector<Tensor> params, SgdOptions opts) : params_(std::move(params)), opts_(opts) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto& g = p.grad_buffer();
    auto d = p.mutable_data();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < d.size(); ++j) {
      const double gj = double(g[j]) + opts_.weight_decay * d[j];
      v[j] = float(opts_.momentum * v[j] + gj);
      d[j] = float(d[j] - opts_.lr * v[j]);
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto& g = p.grad_buffer();
    auto d = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < d.size(); ++j) {
      m[j] = opts_.beta1 * m[j] + (1 - opts_.beta1) * g[j];
      v[j] = opts_.beta2 * v[j] + (1 - opts_.beta2) * double(g[j]) * g[j];
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts_.eps) + opts_.weight_decay * d[j];
      d[j] = float(d[j] - opts_.lr * update);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double n2 = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (float g : p.impl()->grad) n2 += double(g) * g;
  const double norm = std::sqrt(n2);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      for (float& g : p.impl()->grad) g = float(g * s);
  }
  return norm;
}

}  // namespace cake
