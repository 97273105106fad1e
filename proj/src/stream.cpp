// SPDX-License-Identifier: Apache-2.0

#include "cake/stream.hpp"

#include <chrono>

#include "cake/autograd.hpp"
#include "cake/ops.hpp"

namespace cake {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Window of t_clip maps along the time axis, padded at the front with frame 0.
Tensor window_map(const StreamState& s, std::size_t t_clip) {
  std::vector<Tensor> parts;
  parts.reserve(t_clip);
  for (std::size_t i = s.maps.size(); i < t_clip; ++i) parts.push_back(s.first_map);
  for (const auto& m : s.maps) parts.push_back(m);
  return t_clip == 1 ? parts.front() : concat(parts, 2);
}

Tensor head_step(const Student<float>& model, const Tensor& fused, Tensor& h, StepTiming* timing) {
  auto t0 = Clock::now();
  if (!h.defined()) h = Tensor::zeros({1, model.cfg.gru_hidden});
  h = gru_step(model.gru, fused, h);
  if (timing) timing->gru += seconds_since(t0);
  t0 = Clock::now();
  auto scores = softmax(model.classifier.forward(h), 1);
  if (timing) timing->head += seconds_since(t0);
  return scores;
}

}  // namespace

StreamOutput stream_step(const Student<float>& model, StreamState& state, const Tensor& frame, StepTiming* timing) {
  NoGradGuard no_grad;
  const auto& cfg = model.cfg;
  if (frame.rank() != 3 || frame.dim(0) != 3) throw ShapeError("stream_step: frame " + shape_str(frame.shape()));
  auto t0 = Clock::now();
  auto map = model.backbone.forward(reshape(frame, {1, 3, 1, frame.dim(1), frame.dim(2)}));
  if (state.t == 0) state.first_map = map;
  state.maps.push_back(map);
  if (state.maps.size() > cfg.t_clip) state.maps.pop_front();
  ++state.t;
  auto window = window_map(state, cfg.t_clip);
  if (timing) timing->backbone += seconds_since(t0);

  t0 = Clock::now();
  auto fused = clip_features(model, window).fused;
  if (timing) timing->dma += seconds_since(t0);

  auto scores = head_step(model, fused, state.h, timing);
  return {{scores.data().begin(), scores.data().end()}, {state.h.data().begin(), state.h.data().end()}};
}

Tensor stream_features(const Student<float>& model, const SyntheticClip& clip) {
  NoGradGuard no_grad;
  StreamState state;
  std::vector<Tensor> rows;
  rows.reserve(clip.length());
  for (std::size_t t = 0; t < clip.length(); ++t) {
    auto map = model.backbone.forward(reshape(clip.frame(t), {1, 3, 1, clip.frames.dim(2), clip.frames.dim(3)}));
    if (t == 0) state.first_map = map;
    state.maps.push_back(map);
    if (state.maps.size() > model.cfg.t_clip) state.maps.pop_front();
    rows.push_back(clip_features(model, window_map(state, model.cfg.t_clip)).fused);
  }
  return concat(rows, 0);
}

TrackOutput run_head(const Student<float>& model, const Tensor& features, const std::vector<Label>& labels) {
  NoGradGuard no_grad;
  if (features.rank() != 2 || features.dim(0) != labels.size() || features.dim(1) != model.cfg.fused_dim())
    throw ShapeError("run_head: features " + shape_str(features.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  TrackOutput out;
  out.track.num_classes = model.cfg.classes + 1;
  Tensor h;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    auto scores = head_step(model, slice_rows(features, t, t + 1), h, nullptr);
    out.track.append({scores.data().begin(), scores.data().end()}, labels[t]);
    out.hidden.insert(out.hidden.end(), h.data().begin(), h.data().end());
  }
  return out;
}

TrackOutput stream_clip(const Student<float>& model, const SyntheticClip& clip) {
  TrackOutput out;
  out.track.num_classes = model.cfg.classes + 1;
  StreamState state;
  for (std::size_t t = 0; t < clip.length(); ++t) {
    auto step = stream_step(model, state, clip.frame(t));
    out.track.append(step.scores, clip.labels[t]);
    out.hidden.insert(out.hidden.end(), step.hidden.begin(), step.hidden.end());
  }
  return out;
}

std::vector<std::vector<float>> sliding_window_scores(const Student<float>& model, const SyntheticClip& clip) {
  NoGradGuard no_grad;
  const std::size_t L = model.cfg.t_clip, H = clip.frames.dim(2), W = clip.frames.dim(3);
  std::vector<std::vector<float>> out;
  auto h = Tensor::zeros({1, model.cfg.gru_hidden});
  for (std::size_t t = 0; t < clip.length(); ++t) {
    std::vector<Tensor> frames;
    for (std::size_t i = 0; i < L; ++i) {
      const long src = long(t) - long(L - 1 - i);
      frames.push_back(reshape(clip.frame(src < 0 ? 0 : std::size_t(src)), {3, 1, H, W}));
    }
    auto window = reshape(concat(frames, 1), {1, 3, L, H, W});
    auto fused = student_forward(model, window).fused;
    h = gru_step(model.gru, fused, h);
    auto scores = softmax(model.classifier.forward(h), 1);
    out.emplace_back(scores.data().begin(), scores.data().end());
  }
  return out;
}

}  // namespace cake
