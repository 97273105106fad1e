// SPDX-License-Identifier: Apache-2.0

#include "cake/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace cake {

namespace {

constexpr std::array<std::array<int, 2>, 8> kDirections{
    {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {-1, -1}, {-1, 1}, {1, -1}}};

float quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return float(std::round(v * 255.0) / 255.0);
}

using Rng64 = std::mt19937_64;

double uni(Rng64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
std::size_t pick_int(Rng64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct Canvas {
  std::size_t T, H, W;
  std::vector<float> frames, flow;

  Canvas(std::size_t t, std::size_t h, std::size_t w) : T(t), H(h), W(w), frames(3 * t * h * w), flow(2 * t * h * w) {}
  float& px(std::size_t c, std::size_t t, std::size_t y, std::size_t x) { return frames[((c * T + t) * H + y) * W + x]; }
  float& fl(std::size_t c, std::size_t t, std::size_t y, std::size_t x) { return flow[((c * T + t) * H + y) * W + x]; }
};

// Smooth low-contrast scene: a few random plane waves per channel.
std::vector<float> make_scene(Rng64& rng, std::size_t H, std::size_t W) {
  std::vector<float> scene(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = uni(rng, 0.05, 0.2);
    std::array<std::array<double, 3>, 3> waves;
    for (auto& w : waves) w = {uni(rng, -0.9, 0.9), uni(rng, -0.9, 0.9), uni(rng, 0, 6.3)};
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double v = base;
        for (const auto& w : waves) v += 0.04 * std::sin(w[0] * double(x) + w[1] * double(y) + w[2]);
        scene[(c * H + y) * W + x] = quantize(v);
      }
  }
  return scene;
}

std::vector<float> make_texture(Rng64& rng, std::size_t b) {
  std::vector<float> tex(3 * b * b);
  for (auto& v : tex) v = quantize(uni(rng, 0.55, 1.0));
  return tex;
}

void paint_scene(Canvas& cv, const std::vector<float>& scene, std::size_t t) {
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < cv.H; ++y)
      for (std::size_t x = 0; x < cv.W; ++x) cv.px(c, t, y, x) = scene[(c * cv.H + y) * cv.W + x];
}

void paint_blob(Canvas& cv, const std::vector<float>& tex, std::size_t b, std::size_t t, std::size_t y0,
                std::size_t x0, double gain) {
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < b; ++y)
      for (std::size_t x = 0; x < b; ++x) cv.px(c, t, y0 + y, x0 + x) = quantize(tex[(c * b + y) * b + x] * gain);
}

void render_background(Canvas& cv, Rng64& rng, const std::vector<float>& scene, std::size_t t0, std::size_t len,
                       BackgroundMode mode, std::size_t blob) {
  switch (mode) {
    case BackgroundMode::static_scene:
      for (std::size_t t = t0; t < t0 + len; ++t) paint_scene(cv, scene, t);
      break;
    case BackgroundMode::random_texture:
      for (std::size_t t = t0; t < t0 + len; ++t)
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t y = 0; y < cv.H; ++y)
            for (std::size_t x = 0; x < cv.W; ++x) cv.px(c, t, y, x) = quantize(uni(rng, 0.0, 1.0));
      break;
    case BackgroundMode::flicker_blob: {
      const auto tex = make_texture(rng, blob);
      const std::size_t y0 = pick_int(rng, 0, cv.H - blob), x0 = pick_int(rng, 0, cv.W - blob);
      for (std::size_t t = t0; t < t0 + len; ++t) {
        paint_scene(cv, scene, t);
        paint_blob(cv, tex, blob, t, y0, x0, uni(rng, 0.55, 1.0));
      }
      break;
    }
  }
}

// Start coordinate so that start + v * (len - 1) stays in [0, extent - blob].
std::size_t start_coord(Rng64& rng, int v, std::size_t len, std::size_t extent, std::size_t blob) {
  const std::size_t travel = std::size_t(std::abs(v)) * (len - 1);
  const std::size_t room = extent - blob - travel;
  const std::size_t s = pick_int(rng, 0, room);
  return v < 0 ? s + travel : s;
}

void render_action(Canvas& cv, Rng64& rng, const std::vector<float>& scene, std::size_t t0, std::size_t len,
                   Label label, std::size_t blob, std::vector<Label>& labels) {
  const auto [vx, vy] = class_velocity(label);
  const auto tex = make_texture(rng, blob);
  std::size_t x = start_coord(rng, vx, len, cv.W, blob);
  std::size_t y = start_coord(rng, vy, len, cv.H, blob);
  for (std::size_t t = t0; t < t0 + len; ++t) {
    paint_scene(cv, scene, t);
    paint_blob(cv, tex, blob, t, y, x, 1.0);
    for (std::size_t yy = y; yy < y + blob; ++yy)
      for (std::size_t xx = x; xx < x + blob; ++xx) {
        cv.fl(0, t, yy, xx) = float(vx);
        cv.fl(1, t, yy, xx) = float(vy);
      }
    labels[t] = label;
    x = std::size_t(long(x) + vx);
    y = std::size_t(long(y) + vy);
  }
}

SyntheticClip finish_clip(Canvas&& cv, std::vector<Label> labels) {
  SyntheticClip clip;
  clip.frames = Tensor({3, cv.T, cv.H, cv.W}, std::move(cv.frames));
  clip.flow = Tensor({2, cv.T, cv.H, cv.W}, std::move(cv.flow));
  clip.labels = std::move(labels);
  return clip;
}

Tensor channel_window(const Tensor& src, std::size_t t0, std::size_t len) {
  const std::size_t C = src.dim(0), T = src.dim(1), HW = src.dim(2) * src.dim(3);
  if (len == 0 || t0 + len > T) throw ShapeError("window [" + std::to_string(t0) + ", +" + std::to_string(len) + ") of " + std::to_string(T) + " frames");
  std::vector<float> out(C * len * HW);
  auto d = src.data();
  for (std::size_t c = 0; c < C; ++c)
    std::copy_n(d.begin() + long((c * T + t0) * HW), len * HW, out.begin() + long(c * len * HW));
  return Tensor({C, len, src.dim(2), src.dim(3)}, std::move(out));
}

}  // namespace

std::array<int, 2> class_velocity(Label label) {
  if (label < 1 || label > kDirections.size()) throw ContractError("no motion class " + std::to_string(label));
  return kDirections[label - 1];
}

void SynthConfig::validate() const {
  if (classes < 2 || classes > 8) throw ConfigError("classes must lie in [2, 8]");
  if (blob == 0 || blob > height || blob > width) throw ConfigError("blob larger than the frame");
  if (!(background_fraction >= 0.0 && background_fraction < 1.0))
    throw ConfigError("background_fraction must lie in [0, 1)");
  if (min_action < 2 || min_action > max_action) throw ConfigError("need 2 <= min_action <= max_action");
  if (max_action > std::min(height, width) - blob + 1)
    throw ConfigError("max_action frames of travel do not fit in the frame");
  if (background_modes.empty()) throw ConfigError("at least one background mode is required");
  const std::size_t a = action_frames();
  if (frames == 0) throw ConfigError("frames must be positive");
  if (a > 0) {
    const std::size_t segments = (a + max_action - 1) / max_action;
    if (a / segments < min_action)
      throw ConfigError("action frames " + std::to_string(a) + " cannot be split into segments of " +
                        std::to_string(min_action) + ".." + std::to_string(max_action));
    if (frames - a + 1 < segments) throw ConfigError("not enough background frames to separate action segments");
  }
}

std::size_t SynthConfig::action_frames() const {
  return std::size_t(std::llround((1.0 - background_fraction) * double(frames)));
}

Tensor SyntheticClip::frame(std::size_t t) const {
  auto w = channel_window(frames, t, 1);
  return Tensor({3, frames.dim(2), frames.dim(3)}, std::vector<float>(w.data().begin(), w.data().end()));
}

Tensor SyntheticClip::frame_window(std::size_t t0, std::size_t len) const { return channel_window(frames, t0, len); }
Tensor SyntheticClip::flow_window(std::size_t t0, std::size_t len) const { return channel_window(flow, t0, len); }

SyntheticClip synth_generate(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  Rng64 rng(seed);
  Canvas cv(cfg.frames, cfg.height, cfg.width);
  std::vector<Label> labels(cfg.frames, 0);
  const auto scene = make_scene(rng, cfg.height, cfg.width);

  const std::size_t A = cfg.action_frames();
  const std::size_t segments = A == 0 ? 0 : (A + cfg.max_action - 1) / cfg.max_action;
  std::vector<std::size_t> lengths(segments, segments ? A / segments : 0);
  for (std::size_t i = 0; i < (segments ? A % segments : 0); ++i) ++lengths[i];

  // Background frames go into segments + 1 gaps; inner gaps get at least one
  // frame so consecutive actions never touch.
  const std::size_t B = cfg.frames - A;
  std::vector<std::size_t> gaps(segments + 1, 0);
  std::size_t left = B;
  for (std::size_t i = 1; i < segments; ++i) {
    gaps[i] = 1;
    --left;
  }
  for (std::size_t i = 0; i < left; ++i) ++gaps[pick_int(rng, 0, segments)];

  auto background = [&](std::size_t t0, std::size_t len) {
    constexpr std::size_t kMaxRun = 20;
    while (len > 0) {
      const std::size_t run = std::min(len, kMaxRun);
      const auto mode = cfg.background_modes[pick_int(rng, 0, cfg.background_modes.size() - 1)];
      render_background(cv, rng, scene, t0, run, mode, cfg.blob);
      t0 += run;
      len -= run;
    }
  };

  std::size_t t = 0;
  for (std::size_t s = 0; s <= segments; ++s) {
    background(t, gaps[s]);
    t += gaps[s];
    if (s == segments) break;
    const Label label = Label(pick_int(rng, 1, cfg.classes));
    render_action(cv, rng, scene, t, lengths[s], label, cfg.blob, labels);
    t += lengths[s];
  }
  return finish_clip(std::move(cv), std::move(labels));
}

SyntheticClip synth_background(std::uint64_t seed, const SynthConfig& cfg, BackgroundMode mode) {
  cfg.validate();
  Rng64 rng(seed);
  Canvas cv(cfg.frames, cfg.height, cfg.width);
  const auto scene = make_scene(rng, cfg.height, cfg.width);
  render_background(cv, rng, scene, 0, cfg.frames, mode, cfg.blob);
  return finish_clip(std::move(cv), std::vector<Label>(cfg.frames, 0));
}

std::vector<std::size_t> Dataset::label_histogram() const {
  std::vector<std::size_t> h(classes + 1, 0);
  for (const auto& c : clips)
    for (Label y : c.labels) ++h.at(y);
  return h;
}

Dataset synth_dataset(std::uint64_t base_seed, std::size_t count, const SynthConfig& cfg) {
  Dataset ds;
  ds.classes = cfg.classes;
  ds.clips.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.clips.push_back(synth_generate(base_seed + i, cfg));
  return ds;
}

Splits synth_splits(std::uint64_t seed, const SynthConfig& cfg, std::size_t train, std::size_t val,
                    std::size_t test) {
  auto base = [seed](std::uint64_t split) { return (seed * 3 + split) << 20; };
  return {synth_dataset(base(0), train, cfg), synth_dataset(base(1), val, cfg), synth_dataset(base(2), test, cfg)};
}

namespace {

constexpr char kDatasetMagic[4] = {'C', 'K', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("truncated dataset file reading " + what);
  return v;
}

void read_floats(std::istream& is, std::vector<float>& out, const std::string& what) {
  if (!is.read(reinterpret_cast<char*>(out.data()), std::streamsize(out.size() * 4)))
    throw IoError("truncated dataset file reading " + what);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const std::size_t T = ds.clips.empty() ? 0 : ds.clips[0].length();
  const std::size_t H = ds.clips.empty() ? 0 : ds.clips[0].frames.dim(2);
  const std::size_t W = ds.clips.empty() ? 0 : ds.clips[0].frames.dim(3);
  os.write(kDatasetMagic, 4);
  put_u32(os, kDatasetVersion);
  put_u32(os, std::uint32_t(ds.clips.size()));
  put_u32(os, std::uint32_t(ds.classes));
  put_u32(os, std::uint32_t(T));
  put_u32(os, std::uint32_t(H));
  put_u32(os, std::uint32_t(W));
  for (const auto& c : ds.clips) {
    if (c.length() != T || c.frames.dim(2) != H || c.frames.dim(3) != W)
      throw ShapeError("save_dataset: clips must share T, H, W");
    os.write(reinterpret_cast<const char*>(c.frames.data().data()), std::streamsize(c.frames.numel() * 4));
    os.write(reinterpret_cast<const char*>(c.flow.data().data()), std::streamsize(c.flow.numel() * 4));
    os.write(reinterpret_cast<const char*>(c.labels.data()), std::streamsize(c.labels.size()));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw IoError(path.string() + " is not a dataset file (bad magic)");
  const auto version = get_u32(is, "version");
  if (version != kDatasetVersion) throw IoError("unsupported dataset version " + std::to_string(version));
  const auto count = get_u32(is, "clip count");
  Dataset ds;
  ds.classes = get_u32(is, "class count");
  const std::size_t T = get_u32(is, "T"), H = get_u32(is, "H"), W = get_u32(is, "W");
  if (count > 0 && (T == 0 || H == 0 || W == 0)) throw IoError("dataset header has a zero extent");
  // Reject headers that promise more payload than the file holds before
  // allocating anything.
  const auto here = is.tellg();
  is.seekg(0, std::ios::end);
  const auto remaining = std::uintmax_t(is.tellg() - here);
  is.seekg(here);
  const std::uintmax_t per_clip = std::uintmax_t(T) * H * W * 5 * 4 + T;
  if (std::uintmax_t(count) * per_clip != remaining) throw IoError("dataset payload size does not match its header");
  ds.clips.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<float> frames(3 * T * H * W), flow(2 * T * H * W);
    read_floats(is, frames, "frames");
    read_floats(is, flow, "flow");
    std::vector<Label> labels(T);
    if (!is.read(reinterpret_cast<char*>(labels.data()), std::streamsize(T))) throw IoError("truncated labels");
    for (Label y : labels)
      if (y > ds.classes) throw IoError("label " + std::to_string(y) + " exceeds class count");
    ds.clips.push_back({Tensor({3, T, H, W}, std::move(frames)), Tensor({2, T, H, W}, std::move(flow)),
                        std::move(labels)});
  }
  return ds;
}

std::vector<ActionWindow> action_windows(const Dataset& ds, std::size_t length) {
  if (length == 0) throw ContractError("action_windows: zero length");
  std::vector<ActionWindow> out;
  for (std::size_t c = 0; c < ds.clips.size(); ++c) {
    const auto& y = ds.clips[c].labels;
    std::size_t run_start = 0;
    for (std::size_t t = 0; t <= y.size(); ++t) {
      if (t < y.size() && t > run_start && y[t] == y[run_start]) continue;
      if (t > run_start && y[run_start] != 0)
        for (std::size_t s = run_start; s + length <= t; ++s) out.push_back({c, s, y[run_start]});
      run_start = t;
    }
  }
  return out;
}

}  // namespace cake
