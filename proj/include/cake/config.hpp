// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, stored as JSON. Every field is optional in the file and
// falls back to the default below; unknown keys are rejected.
//
// {
//   "seed": 0,
//   "data":  { "dir": "data", "train_clips": 24, "val_clips": 6, "test_clips": 12,
//              "classes": 4, "frames": 120, "height": 16, "width": 16, "blob": 5,
//              "background_fraction": 0.8, "min_action": 8, "max_action": 12,
//              "background_modes": ["static_scene", "random_texture", "flicker_blob"] },
//   "model": { "classes": 4, "d_feat": 32, "backbone_widths": [16, 32],
//              "backbone_pool": [true, true, false], "teacher_widths": [16, 32],
//              "t_clip": 8, "gru_hidden": 64, "proj_dim": 32, "use_dma": true,
//              "reduction": 0.125, "kernels": 4, "dynamic": true,
//              "dynamic_hallucination": true },
//   "loss":  { "distill": 1.0, "contrast": 1.0, "focal_gamma": 2.0, "focal_alpha": 0.25,
//              "temperature": 0.2, "clip_length": 16, "background": 0 },
//   "train": { "teacher": {stage}, "stage1": {stage}, "stage2": {stage}, "stage3": {stage},
//              "contrast_mode": "floating" | "standard", "stage3_loss": "focal" | "cross_entropy",
//              "queue_size": 256, "ema_momentum": 0.99, "chunks_per_epoch": 256 },
//   "bench": { "frames": 600, "warmup": 50, "threads": 1 }
// }
//
// {stage} = { "epochs", "batch", "lr", "momentum", "weight_decay",
//             "optimizer": "sgd" | "adamw", "grad_clip", "cosine": bool }

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cake/data.hpp"
#include "cake/models.hpp"
#include "cake/train.hpp"

namespace cake {

struct DataConfig {
  std::string dir = "data";
  std::size_t train_clips = 24;
  std::size_t val_clips = 6;
  std::size_t test_clips = 12;
  SynthConfig synth{};

  bool operator==(const DataConfig&) const = default;
};

struct BenchConfig {
  std::size_t frames = 600;
  std::size_t warmup = 50;
  std::size_t threads = 1;

  bool operator==(const BenchConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data{};
  ModelConfig model{};
  TrainConfig train{};
  BenchConfig bench{};

  /// Cross-field checks: class counts agree, chunk length fits the videos,
  /// and each section validates.
  void validate() const;
  bool operator==(const RunConfig&) const = default;

  /// Reference model dimensions, stage 1/2 schedules and temperature 0.07; toy data with action
  /// segments long enough for 13-frame clips.
  static RunConfig paper_preset();
};

/// Throws ConfigError on malformed JSON, unknown keys or wrong types.
RunConfig parse_config(const std::string& json_text);
std::string serialize_config(const RunConfig& cfg);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace cake
