// SPDX-License-Identifier: Apache-2.0
//
// The staged training recipe.
//
//   teacher  flow classifier on action windows
//   stage 1  backbone + DMA + pretraining head: CE + lambda_distill * distill
//   stage 2  GRU + projection + classifier on chunks of precomputed per-frame
//            features: final-step CE + lambda_contrast * SupCon, keys from an
//            EMA copy of GRU + projection, negatives from a FIFO queue
//   stage 3  classifier only, final-step focal loss
//
// Every stage enables gradients on exactly its own parameters and disables
// them everywhere else.

#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cake/data.hpp"
#include "cake/losses.hpp"
#include "cake/metrics.hpp"
#include "cake/models.hpp"

namespace cake {

enum class OptimizerKind { sgd, adamw };

struct StageOptions {
  std::size_t epochs = 1;
  std::size_t batch = 8;
  double lr = 0.1;
  double momentum = 0.9;  // SGD only
  double weight_decay = 0.0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  /// Global gradient-norm bound; 0 disables clipping.
  double grad_clip = 5.0;
  /// Half-cosine decay of lr to zero over the stage's steps.
  bool cosine = false;

  void validate(const std::string& stage) const;
  bool operator==(const StageOptions&) const = default;
};

struct TrainConfig {
  StageOptions teacher{4, 8, 0.05, 0.9, 1e-4, OptimizerKind::sgd, 5.0};
  StageOptions stage1{12, 8, 0.05, 0.9, 1e-4, OptimizerKind::sgd, 5.0, true};
  StageOptions stage2{40, 16, 2e-3, 0.0, 1e-4, OptimizerKind::adamw, 5.0};
  StageOptions stage3{4, 16, 1e-3, 0.0, 0.0, OptimizerKind::adamw, 5.0};
  LossWeights loss{};
  ContrastMode contrast_mode = ContrastMode::floating;
  /// Per-step loss of stage 3; focal with gamma = 0, alpha = 1 equals cross-entropy.
  StepLoss stage3_loss = StepLoss::focal;
  std::size_t queue_size = 256;
  double ema_momentum = 0.99;
  /// Chunks drawn per epoch in stages 2 and 3.
  std::size_t chunks_per_epoch = 256;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct MetricRecord {
  std::string stage;
  std::size_t epoch = 0;
  std::vector<std::pair<std::string, double>> values;

  double get(const std::string& key) const;
};

using MetricsSink = std::function<void(const MetricRecord&)>;

/// Thrown when a loss becomes non-finite; the message names stage, epoch and step.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void train_teacher(Teacher<float>& teacher, const Dataset& train, std::size_t t_clip, const TrainConfig& cfg,
                   std::uint64_t seed, const MetricsSink& sink = {});

/// Top-1 of the teacher on every action window of `ds`.
double teacher_accuracy(const Teacher<float>& teacher, const Dataset& ds, std::size_t t_clip);

/// Classifies z_motion with the teacher's frozen head over every action window
/// of `ds`; top-1 accuracy. Throws ContractError when the dims disagree or the
/// student has no DMA.
double probe_dma_with_teacher_head(const Student<float>& student, const Teacher<float>& teacher, const Dataset& ds);

/// `probe` (optional) is evaluated with probe_dma_with_teacher_head after every
/// epoch and logged as "probe".
void train_stage1(Student<float>& student, const Teacher<float>& teacher, const Dataset& train,
                  const TrainConfig& cfg, std::uint64_t seed, const MetricsSink& sink = {},
                  const Dataset* probe = nullptr);

/// Per-frame fused features of every clip, as the streaming engine sees them.
struct StreamSet {
  std::vector<Tensor> features;              // [T, fused_dim] per clip
  std::vector<std::vector<Label>> labels;    // [T] per clip

  std::size_t size() const { return features.size(); }
};

StreamSet precompute_features(const Student<float>& student, const Dataset& ds);

struct Stage2Report {
  std::size_t queue_size = 0;
  double final_step_accuracy = 0.0;  // over the last epoch's chunks
};

/// `val` (optional) is scored with evaluate_streams after every epoch.
Stage2Report train_stage2(Student<float>& student, const StreamSet& train, const TrainConfig& cfg,
                          std::uint64_t seed, const MetricsSink& sink = {}, const StreamSet* val = nullptr);

void train_stage3(Student<float>& student, const StreamSet& train, const TrainConfig& cfg, std::uint64_t seed,
                  const MetricsSink& sink = {}, const StreamSet* val = nullptr);

/// Runs the GRU and classifier over every clip from a zero state and
/// concatenates the score tracks.
ScoreTrack evaluate_streams(const Student<float>& student, const StreamSet& set);

}  // namespace cake
