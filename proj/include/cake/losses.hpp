// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: feature distillation, final-step masked classification,
// Floating SupCon over a momentum key queue, and focal loss.

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "cake/nn.hpp"
#include "cake/tensor.hpp"

namespace cake {

using Label = std::uint8_t;

struct LossWeights {
  double distill = 1.0;
  double contrast = 1.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double temperature = 0.2;
  std::size_t clip_length = 16;
  Label background = 0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Mean over the batch of ||z_teacher - z_motion||^2.
template <class T>
BasicTensor<T> distill_loss(const BasicTensor<T>& z_teacher, const BasicTensor<T>& z_motion);

/// Per-row cross-entropy of logits [N, C], shape (N).
template <class T>
BasicTensor<T> cross_entropy_rows(const BasicTensor<T>& logits, const std::vector<Label>& labels);

template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<Label>& labels);

/// Mean over the batch of -alpha * (1 - p_t)^gamma * log(p_t).
template <class T>
BasicTensor<T> focal_loss(const BasicTensor<T>& logits, const std::vector<Label>& labels, double gamma,
                          double alpha);

enum class StepLoss { cross_entropy, focal };

/// Step mask: 1 at the final step t = L, 0 elsewhere.
std::vector<double> final_step_mask(std::size_t length);

/// sum_t mask_t * loss(logits_t, y_t) for logits [L, K+1]. Rank-3 input is a
/// batch, [B, L, K+1] or, with time_major, [L, B, K+1]; labels follow the same
/// row-major order and the result is the batch mean.
template <class T>
BasicTensor<T> masked_temporal_loss(const BasicTensor<T>& logits, const std::vector<Label>& labels,
                                    StepLoss kind = StepLoss::cross_entropy, double gamma = 2.0,
                                    double alpha = 0.25, bool time_major = false);

/// exp(a . b / tau).
double similarity(std::span<const float> a, std::span<const float> b, double tau);

/// Fixed-capacity FIFO of detached unit-norm keys with their labels.
class ContrastQueue {
 public:
  ContrastQueue(std::size_t capacity, std::size_t dim);

  /// Appends each row of keys [B, D]; the oldest entries fall out past
  /// capacity. Throws ContractError if a key's norm deviates from 1 by more
  /// than 1e-3.
  void push(const Tensor& keys, const std::vector<Label>& labels);

  std::size_t size() const { return labels_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return labels_.empty(); }
  /// Keys oldest first, [size, D]; a constant tensor.
  Tensor keys() const;
  std::vector<Label> labels() const { return {labels_.begin(), labels_.end()}; }

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::deque<std::vector<float>> keys_;
  std::deque<Label> labels_;
};

enum class ContrastMode {
  floating,  // action queries cluster by class, background queries float
  standard,  // background treated as one more class to cluster
};

/// Contrastive loss of queries q [B, D] against their momentum keys
/// k_plus [B, D] and a bank of keys [M, D] (M may be 0). Returns the mean over
/// the batch. With mode == floating:
///   action query:     -log (S(q,k+) + sum_{y_k = y_q} S(q,k)) / (S(q,k+) + sum_k S(q,k))
///   background query: -log S(q,k+) / (S(q,k+) + sum_{y_k != y_b} S(q,k))
/// evaluated in the log domain. Gradients flow into `bank` only if it requires
/// them.
template <class T>
BasicTensor<T> supcon_loss(const BasicTensor<T>& q, const std::vector<Label>& query_labels, const BasicTensor<T>& k_plus,
                           const BasicTensor<T>& bank, const std::vector<Label>& bank_labels, const LossWeights& w,
                           ContrastMode mode = ContrastMode::floating);

/// Queue-backed form; queue keys never receive gradients.
Tensor floating_supcon_loss(const Tensor& q, const std::vector<Label>& query_labels, const Tensor& k_plus,
                            const ContrastQueue& queue, const LossWeights& w,
                            ContrastMode mode = ContrastMode::floating);

/// Key-network parameters mirroring a query network.
struct MomentumEncoderState {
  std::vector<Tensor> key_params;
  std::vector<Tensor> query_params;
  double momentum = 0.999;

  /// Deep copies of the query parameters, detached.
  static MomentumEncoderState mirror(const std::vector<Tensor>& query_params, double momentum);
};

/// theta_k <- m * theta_k + (1 - m) * theta_q.
void ema_update(MomentumEncoderState& state);

}  // namespace cake
