// SPDX-License-Identifier: Apache-2.0
//
// Causal streaming inference. Each step consumes one RGB frame, rebuilds the
// t_clip-frame window ending at it (repeating frame 0 while fewer frames have
// arrived), runs the DMA and fusion on the window, advances the GRU by one
// step and classifies the new hidden state.
//
// The backbone works frame by frame, so its per-frame maps are cached instead
// of recomputing the whole window every step; the result is identical to
// running the backbone on the window.

#pragma once

#include <cstddef>
#include <deque>
#include <vector>

#include "cake/data.hpp"
#include "cake/metrics.hpp"
#include "cake/models.hpp"

namespace cake {

struct StreamState {
  Tensor h;                 // [1, H]
  std::deque<Tensor> maps;  // backbone maps [1, D, 1, h, w] of the last min(t, t_clip) frames
  Tensor first_map;         // map of frame 0, used to pad the window at cold start
  std::size_t t = 0;        // frames consumed

  void reset() { *this = StreamState{}; }
};

/// Wall-clock seconds spent in each component during one step.
struct StepTiming {
  double backbone = 0, dma = 0, gru = 0, head = 0;
  double sum() const { return backbone + dma + gru + head; }
};

struct StreamOutput {
  std::vector<float> scores;  // softmax over K + 1 classes
  std::vector<float> hidden;  // GRU state after this step
};

/// frame: [3, H, W].
StreamOutput stream_step(const Student<float>& model, StreamState& state, const Tensor& frame,
                         StepTiming* timing = nullptr);

/// Fused per-frame features [T, fused_dim] exactly as stream_step computes them.
Tensor stream_features(const Student<float>& model, const SyntheticClip& clip);

struct TrackOutput {
  ScoreTrack track;
  std::vector<float> hidden;  // [T, H] row-major
};

/// GRU from a zero state and the classifier over precomputed features; the
/// result equals streaming the clip frame by frame.
TrackOutput run_head(const Student<float>& model, const Tensor& features, const std::vector<Label>& labels);

/// Streams a clip through stream_step.
TrackOutput stream_clip(const Student<float>& model, const SyntheticClip& clip);

/// Reference path: for each t, assembles the padded window from raw frames and
/// runs student_forward on it, with no caching. Returns [T][K + 1] scores.
std::vector<std::vector<float>> sliding_window_scores(const Student<float>& model, const SyntheticClip& clip);

}  // namespace cake
