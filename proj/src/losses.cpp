// SPDX-License-Identifier: Apache-2.0

#include "cake/losses.hpp"

#include <cmath>
#include <string>

#include "cake/ops.hpp"

namespace cake {

void LossWeights::validate() const {
  if (!(temperature > 0.0)) throw ContractError("temperature must be > 0");
  if (!(focal_gamma >= 0.0)) throw ContractError("focal gamma must be >= 0");
  if (!(focal_alpha > 0.0 && focal_alpha <= 1.0)) throw ContractError("focal alpha must lie in (0, 1]");
  if (clip_length == 0) throw ContractError("clip length must be >= 1");
}

template <class T>
BasicTensor<T> distill_loss(const BasicTensor<T>& z_teacher, const BasicTensor<T>& z_motion) {
  if (z_teacher.shape() != z_motion.shape() || z_teacher.rank() != 2)
    throw ShapeError("distill_loss: " + shape_str(z_teacher.shape()) + " vs " + shape_str(z_motion.shape()));
  auto d = sub(z_teacher, z_motion);
  return scale(sum(mul(d, d)), T(1) / T(z_teacher.dim(0)));
}

namespace {

template <class T>
std::vector<std::size_t> checked_labels(const BasicTensor<T>& logits, const std::vector<Label>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("logits " + shape_str(logits.shape()) + " with " + std::to_string(labels.size()) + " labels");
  std::vector<std::size_t> idx(labels.begin(), labels.end());
  for (auto y : idx)
    if (y >= logits.dim(1))
      throw ContractError("label " + std::to_string(y) + " out of range for " + std::to_string(logits.dim(1)) +
                          " classes");
  return idx;
}

// -log p_t per row.
template <class T>
BasicTensor<T> focal_rows(const BasicTensor<T>& logits, const std::vector<Label>& labels, double gamma, double alpha) {
  auto logp = pick(log_softmax(logits, 1), checked_labels(logits, labels));
  auto one_minus = add_scalar(scale(exp(logp), T(-1)), T(1));
  return scale(mul(pow(one_minus, T(gamma)), logp), T(-alpha));
}

}  // namespace

template <class T>
BasicTensor<T> cross_entropy_rows(const BasicTensor<T>& logits, const std::vector<Label>& labels) {
  return scale(pick(log_softmax(logits, 1), checked_labels(logits, labels)), T(-1));
}

template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<Label>& labels) {
  return mean(cross_entropy_rows(logits, labels));
}

template <class T>
BasicTensor<T> focal_loss(const BasicTensor<T>& logits, const std::vector<Label>& labels, double gamma,
                          double alpha) {
  return mean(focal_rows(logits, labels, gamma, alpha));
}

std::vector<double> final_step_mask(std::size_t length) {
  if (length == 0) throw ContractError("final_step_mask: empty sequence");
  std::vector<double> m(length, 0.0);
  m.back() = 1.0;
  return m;
}

template <class T>
BasicTensor<T> masked_temporal_loss(const BasicTensor<T>& logits, const std::vector<Label>& labels, StepLoss kind,
                                    double gamma, double alpha, bool time_major) {
  std::size_t batch = 1;
  BasicTensor<T> flat = logits;
  if (logits.rank() == 3) {
    batch = time_major ? logits.dim(1) : logits.dim(0);
    flat = reshape(logits, {logits.dim(0) * logits.dim(1), logits.dim(2)});
  } else if (logits.rank() != 2) {
    throw ShapeError("masked_temporal_loss: logits " + shape_str(logits.shape()));
  }
  const std::size_t length = flat.dim(0) / batch;
  auto per_step = kind == StepLoss::focal ? focal_rows(flat, labels, gamma, alpha) : cross_entropy_rows(flat, labels);

  auto step_mask = final_step_mask(length);
  std::vector<T> mask;
  mask.reserve(flat.dim(0));
  if (time_major) {
    for (double m : step_mask)
      for (std::size_t b = 0; b < batch; ++b) mask.push_back(T(m));
  } else {
    for (std::size_t b = 0; b < batch; ++b)
      for (double m : step_mask) mask.push_back(T(m));
  }
  auto masked = mul(per_step, BasicTensor<T>({flat.dim(0)}, std::move(mask)));
  return scale(sum(masked), T(1) / T(batch));
}

double similarity(std::span<const float> a, std::span<const float> b, double tau) {
  if (a.size() != b.size()) throw ShapeError("similarity: length mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += double(a[i]) * double(b[i]);
  return std::exp(dot / tau);
}

ContrastQueue::ContrastQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
  if (capacity == 0 || dim == 0) throw ContractError("ContrastQueue: capacity and dim must be positive");
}

void ContrastQueue::push(const Tensor& keys, const std::vector<Label>& labels) {
  if (keys.rank() != 2 || keys.dim(1) != dim_ || keys.dim(0) != labels.size())
    throw ShapeError("ContrastQueue::push: keys " + shape_str(keys.shape()) + " with " +
                     std::to_string(labels.size()) + " labels, dim " + std::to_string(dim_));
  auto data = keys.data();
  // Validate the whole batch first so a bad key leaves the queue untouched.
  std::vector<double> norms(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) n2 += double(data[b * dim_ + j]) * data[b * dim_ + j];
    norms[b] = std::sqrt(n2);
    if (std::abs(norms[b] - 1.0) > 1e-3)
      throw ContractError("ContrastQueue::push: key norm " + std::to_string(norms[b]) + " is not 1");
  }
  for (std::size_t b = 0; b < labels.size(); ++b) {
    std::vector<float> k(dim_);
    for (std::size_t j = 0; j < dim_; ++j) k[j] = float(data[b * dim_ + j] / norms[b]);
    keys_.push_back(std::move(k));
    labels_.push_back(labels[b]);
    if (labels_.size() > capacity_) {
      keys_.pop_front();
      labels_.pop_front();
    }
  }
}

Tensor ContrastQueue::keys() const {
  if (keys_.empty()) return {};
  std::vector<float> flat;
  flat.reserve(keys_.size() * dim_);
  for (const auto& k : keys_) flat.insert(flat.end(), k.begin(), k.end());
  return Tensor({keys_.size(), dim_}, std::move(flat));
}

template <class T>
BasicTensor<T> supcon_loss(const BasicTensor<T>& q, const std::vector<Label>& query_labels,
                           const BasicTensor<T>& k_plus, const BasicTensor<T>& bank,
                           const std::vector<Label>& bank_labels, const LossWeights& w, ContrastMode mode) {
  w.validate();
  if (q.rank() != 2 || q.shape() != k_plus.shape() || q.dim(0) != query_labels.size())
    throw ShapeError("supcon_loss: q " + shape_str(q.shape()) + ", k+ " + shape_str(k_plus.shape()));
  const std::size_t B = q.dim(0), D = q.dim(1);
  const bool has_bank = bank.defined() && bank.numel() > 0;
  const std::size_t M = has_bank ? bank.dim(0) : 0;
  if (has_bank && (bank.rank() != 2 || bank.dim(1) != D || M != bank_labels.size()))
    throw ShapeError("supcon_loss: bank " + shape_str(bank.shape()));

  // Column 0 holds q . k+, columns 1..M the bank.
  auto pos = matmul(mul(q, k_plus), BasicTensor<T>::ones({D, 1}));
  auto logits = has_bank ? concat<T>({pos, matmul(q, transpose(bank))}, 1) : pos;
  logits = scale(logits, T(1.0 / w.temperature));

  const std::size_t cols = M + 1;
  std::vector<std::uint8_t> num(B * cols, 0), den(B * cols, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const Label y = query_labels[b];
    const bool floating_bg = mode == ContrastMode::floating && y == w.background;
    num[b * cols] = den[b * cols] = 1;
    for (std::size_t m = 0; m < M; ++m) {
      const Label yk = bank_labels[m];
      if (floating_bg) {
        den[b * cols + 1 + m] = yk != w.background;
      } else {
        num[b * cols + 1 + m] = yk == y;
        den[b * cols + 1 + m] = 1;
      }
    }
  }
  return mean(sub(masked_logsumexp(logits, den), masked_logsumexp(logits, num)));
}

Tensor floating_supcon_loss(const Tensor& q, const std::vector<Label>& query_labels, const Tensor& k_plus,
                            const ContrastQueue& queue, const LossWeights& w, ContrastMode mode) {
  return supcon_loss(q, query_labels, k_plus, queue.keys(), queue.labels(), w, mode);
}

MomentumEncoderState MomentumEncoderState::mirror(const std::vector<Tensor>& query_params, double momentum) {
  MomentumEncoderState s;
  s.query_params = query_params;
  s.momentum = momentum;
  for (const auto& p : query_params) {
    std::vector<float> copy(p.data().begin(), p.data().end());
    s.key_params.emplace_back(p.shape(), std::move(copy));
  }
  return s;
}

void ema_update(MomentumEncoderState& state) {
  const double m = state.momentum;
  if (!(m >= 0.0 && m <= 1.0)) throw ContractError("ema_update: momentum outside [0, 1]");
  if (state.key_params.size() != state.query_params.size())
    throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < state.key_params.size(); ++i) {
    auto& k = state.key_params[i];
    const auto& q = state.query_params[i];
    if (k.shape() != q.shape())
      throw ShapeError("ema_update: " + shape_str(k.shape()) + " vs " + shape_str(q.shape()));
    auto kd = k.mutable_data();
    auto qd = q.data();
    for (std::size_t j = 0; j < kd.size(); ++j) kd[j] = float(m * kd[j] + (1.0 - m) * qd[j]);
  }
}

#define CAKE_INSTANTIATE_LOSSES(T)                                                                              \
  template BasicTensor<T> distill_loss(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> cross_entropy_rows(const BasicTensor<T>&, const std::vector<Label>&);                 \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, const std::vector<Label>&);                      \
  template BasicTensor<T> focal_loss(const BasicTensor<T>&, const std::vector<Label>&, double, double);         \
  template BasicTensor<T> masked_temporal_loss(const BasicTensor<T>&, const std::vector<Label>&, StepLoss,      \
                                               double, double, bool);                                           \
  template BasicTensor<T> supcon_loss(const BasicTensor<T>&, const std::vector<Label>&, const BasicTensor<T>&,  \
                                      const BasicTensor<T>&, const std::vector<Label>&, const LossWeights&,     \
                                      ContrastMode);

CAKE_INSTANTIATE_LOSSES(float)
CAKE_INSTANTIATE_LOSSES(double)

}  // namespace cake
