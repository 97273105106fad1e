// SPDX-License-Identifier: Apache-2.0
//
// Synthetic streaming videos with analytic optical flow and per-frame labels.
//
// A video is a sequence of background and action segments over one static
// scene. Action segments show a textured blob translating at a constant
// integer velocity, one compass direction per class. Background segments use
// one of three modes (static scene, per-frame random texture, a stationary
// blob whose brightness flickers); none of them moves, so their flow is zero.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cake/losses.hpp"
#include "cake/tensor.hpp"

namespace cake {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BackgroundMode : std::uint8_t { static_scene = 0, random_texture = 1, flicker_blob = 2 };

/// Per-frame displacement (dx, dy) of class `label` (1-based): right, left,
/// down, up, then the four diagonals.
std::array<int, 2> class_velocity(Label label);

struct SynthConfig {
  std::size_t classes = 4;  // K action classes; labels 1..K, 0 is background
  std::size_t frames = 120;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t blob = 5;
  double background_fraction = 0.8;
  std::size_t min_action = 8;
  std::size_t max_action = 12;
  std::vector<BackgroundMode> background_modes{BackgroundMode::static_scene, BackgroundMode::random_texture,
                                               BackgroundMode::flicker_blob};

  /// Throws ConfigError on an unsatisfiable configuration.
  void validate() const;
  /// Number of action frames per video: round((1 - background_fraction) * frames).
  std::size_t action_frames() const;
  bool operator==(const SynthConfig&) const = default;
};

struct SyntheticClip {
  Tensor frames;              // [3, T, H, W], values k/255
  Tensor flow;                // [2, T, H, W], (dx, dy) from frame t to t+1
  std::vector<Label> labels;  // [T]

  std::size_t length() const { return labels.size(); }
  /// Frame t as [3, H, W].
  Tensor frame(std::size_t t) const;
  /// Frames [t0, t0 + len) as [3, len, H, W].
  Tensor frame_window(std::size_t t0, std::size_t len) const;
  Tensor flow_window(std::size_t t0, std::size_t len) const;
};

/// Deterministic in (seed, cfg).
SyntheticClip synth_generate(std::uint64_t seed, const SynthConfig& cfg);

/// A clip with every frame background, each segment in the given mode.
SyntheticClip synth_background(std::uint64_t seed, const SynthConfig& cfg, BackgroundMode mode);

struct Dataset {
  std::size_t classes = 0;
  std::vector<SyntheticClip> clips;

  /// Frame counts per label 0..K.
  std::vector<std::size_t> label_histogram() const;
};

/// `count` videos from seeds base_seed, base_seed + 1, ...
Dataset synth_dataset(std::uint64_t base_seed, std::size_t count, const SynthConfig& cfg);

/// Split seeds are disjoint: split s uses base seed (seed * 3 + s) << 20.
struct Splits {
  Dataset train, val, test;
};
Splits synth_splits(std::uint64_t seed, const SynthConfig& cfg, std::size_t train, std::size_t val,
                    std::size_t test);

/// Binary layout: "CKDS", u32 version, u32 clip count, u32 K, u32 T, u32 H,
/// u32 W, then per clip: frames f32[3*T*H*W], flow f32[2*T*H*W], labels
/// u8[T]. Little-endian.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// A fixed-length window lying entirely inside one action segment.
struct ActionWindow {
  std::size_t clip = 0;
  std::size_t start = 0;
  Label label = 0;
};

/// Every window of `length` frames fully inside an action segment, in clip
/// then time order.
std::vector<ActionWindow> action_windows(const Dataset& ds, std::size_t length);

}  // namespace cake
