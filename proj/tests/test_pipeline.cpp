// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <numeric>

#include "cake/autograd.hpp"
#include "cake/grad_check.hpp"
#include "cake/ops.hpp"
#include "cake/stream.hpp"
#include "cake/train.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cake;
using cake::testing::Gen;

namespace {

SynthConfig small_synth() {
  SynthConfig c;
  c.frames = 60;
  return c;
}

ModelConfig small_model() {
  ModelConfig m;
  m.t_clip = 4;
  return m;
}

// Deep copies of every parameter, by name.
std::vector<std::pair<std::string, std::vector<float>>> snapshot(const Student<float>& s) {
  NamedParams<float> named;
  s.collect(named);
  std::vector<std::pair<std::string, std::vector<float>>> out;
  for (auto& [n, p] : named) out.emplace_back(n, std::vector<float>(p.data().begin(), p.data().end()));
  return out;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

TrainConfig quick_train() {
  TrainConfig t;
  t.teacher.epochs = 1;
  t.stage1.epochs = 1;
  t.stage2.epochs = 2;
  t.stage3.epochs = 1;
  t.chunks_per_epoch = 32;
  t.queue_size = 16;
  t.loss.clip_length = 8;
  return t;
}

struct Fixture {
  SynthConfig sc = small_synth();
  ModelConfig mc = small_model();
  Splits data = synth_splits(5, sc, 3, 1, 1);
  Teacher<float> teacher;
  Fixture() {
    Rng rng(1);
    teacher = Teacher<float>::init(mc, rng);
  }
  Student<float> student(std::uint64_t seed) const {
    Rng rng(seed);
    return Student<float>::init(mc, rng);
  }
};

// Linearly separable streams: the feature row of a frame is a fixed class
// prototype plus small noise.
StreamSet separable_streams(std::size_t clips, std::size_t F, std::size_t classes, std::uint64_t seed) {
  Gen g(seed);
  std::vector<std::vector<float>> proto(classes + 1, std::vector<float>(F));
  for (auto& p : proto)
    for (auto& x : p) x = float(g.uniform(-1, 1));
  StreamSet set;
  for (std::size_t c = 0; c < clips; ++c) {
    std::vector<Label> labels;
    while (labels.size() < 64) {
      const Label y = Label(g.index(classes + 1));
      const std::size_t len = 6 + g.index(8);
      for (std::size_t i = 0; i < len; ++i) labels.push_back(y);
    }
    labels.resize(64);
    std::vector<float> f;
    for (Label y : labels)
      for (std::size_t j = 0; j < F; ++j) f.push_back(proto[y][j] + float(g.uniform(-0.05, 0.05)));
    set.features.emplace_back(Shape{labels.size(), F}, std::move(f));
    set.labels.push_back(std::move(labels));
  }
  return set;
}

}  // namespace

TEST_CASE("teacher_forward: zero flow gives zero features; duplicates give identical rows") {
  Fixture fx;
  auto zero = teacher_forward(fx.teacher, Tensor::zeros({1, 2, fx.mc.t_clip, 16, 16}));
  for (float v : zero.z.data()) CHECK(v == 0.0f);

  Gen g(3);
  auto one = g.tensor({1, 2, fx.mc.t_clip, 16, 16});
  auto out = teacher_forward(fx.teacher, concat(std::vector<Tensor>{one, one}, 0));
  const std::size_t D = out.z.dim(1);
  for (std::size_t j = 0; j < D; ++j) CHECK(out.z[j] == out.z[D + j]);
  CHECK_THROWS_AS(teacher_forward(fx.teacher, g.tensor({1, 3, fx.mc.t_clip, 16, 16})), ShapeError);
}

TEST_CASE("student_forward: shape contract and clip length check") {
  Fixture fx;
  auto s = fx.student(2);
  Gen g(4);
  auto out = student_forward(s, g.tensor({2, 3, fx.mc.t_clip, 16, 16}, 0, 1));
  CHECK(out.z_static_vec.shape() == Shape{2, fx.mc.d_feat});
  CHECK(out.z_motion.shape() == Shape{2, fx.mc.d_feat});
  CHECK(out.fused.shape() == Shape{2, 2 * fx.mc.d_feat});
  CHECK(out.logits.shape() == Shape{2, fx.mc.classes});
  CHECK_THROWS_AS(student_forward(s, g.tensor({1, 3, fx.mc.t_clip + 1, 16, 16})), ContractError);
}

TEST_CASE("student_forward: a frozen backbone receives no gradient") {
  Fixture fx;
  auto s = fx.student(3);
  set_trainable(s.params({""}), true);
  set_trainable(s.params({"backbone."}), false);
  Gen g(5);
  GradTape tape;
  auto out = student_forward(s, g.tensor({2, 3, fx.mc.t_clip, 16, 16}, 0, 1));
  backward(sum(add(out.logits, out.z_motion.defined() ? sum(out.z_motion) : Tensor::scalar(0))));
  for (auto& p : s.params({"backbone."})) {
    if (!p.has_grad()) continue;
    for (float v : p.grad()) CHECK(v == 0.0f);
  }
  bool dma_has_grad = false;
  for (auto& p : s.params({"dma."}))
    if (p.has_grad())
      for (float v : p.grad()) dma_has_grad |= v != 0.0f;
  CHECK(dma_has_grad);
  set_trainable(s.params({""}), false);
}

TEST_CASE("student_forward passes finite differences on a micro config") {
  ModelConfig m;
  m.d_feat = 4;
  m.backbone_widths = {3, 4};
  m.teacher_widths = {3, 4};
  m.t_clip = 2;
  m.reduction = 0.5;
  m.kernels = 2;
  Rng rng(7);
  auto s = Student<double>::init(m, rng);
  Gen g(8);
  auto x = g.tensor<double>({1, 3, 2, 4, 4}, 0, 1);
  NamedParams<double> named;
  s.collect(named);
  std::vector<TensorD> inputs{x};
  for (auto& [n, p] : named)
    if (starts_with(n, "backbone.") || starts_with(n, "dma.")) inputs.push_back(p);
  auto readout = g.tensor<double>({1, m.fused_dim()});
  auto report = grad_check<double>([&] { return sum(mul(student_forward(s, x).fused, readout)); }, inputs);
  CHECK_MESSAGE(report.pass, report.max_rel_err);
}

TEST_CASE("stream_step matches the sliding-window oracle") {
  Fixture fx;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto s = fx.student(40 + seed);
    auto clip = synth_generate(900 + seed, fx.sc);
    clip.labels.resize(20);
    auto streamed = stream_clip(s, clip);
    auto oracle = sliding_window_scores(s, clip);
    const std::size_t C = fx.mc.classes + 1;
    double worst = 0;
    for (std::size_t t = 0; t < 20; ++t)
      for (std::size_t c = 0; c < C; ++c)
        worst = std::max(worst, std::abs(double(streamed.track.scores[t * C + c]) - double(oracle[t][c])));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("stream_step: normalised scores, reset replay and causality") {
  Fixture fx;
  auto s = fx.student(11);
  auto clip = synth_generate(77, fx.sc);
  const std::size_t T = 12, C = fx.mc.classes + 1;
  StreamState st;
  std::vector<std::vector<float>> first;
  for (std::size_t t = 0; t < T; ++t) {
    auto o = stream_step(s, st, clip.frame(t));
    double total = 0;
    for (float p : o.scores) {
      CHECK(p >= 0.0f);
      total += p;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
    first.push_back(o.scores);
  }
  st.reset();
  for (std::size_t t = 0; t < T; ++t) CHECK(stream_step(s, st, clip.frame(t)).scores == first[t]);

  // Perturbing frame k must leave scores before k untouched.
  Gen g(12);
  for (std::size_t k : {1u, 5u, 11u}) {
    StreamState m;
    for (std::size_t t = 0; t < T; ++t) {
      Tensor f = clip.frame(t);
      if (t == k) f = g.tensor({3, 16, 16}, 0, 1);
      auto o = stream_step(s, m, f);
      if (t < k) CHECK(o.scores == first[t]);
      if (t == k) CHECK(o.scores != first[t]);
    }
  }
  CHECK(C == first[0].size());
}

TEST_CASE("run_head over precomputed features equals streaming") {
  Fixture fx;
  auto s = fx.student(13);
  auto clip = synth_generate(88, fx.sc);
  auto streamed = stream_clip(s, clip);
  auto head = run_head(s, stream_features(s, clip), clip.labels);
  CHECK(cake::testing::max_abs_diff(streamed.track.scores, head.track.scores) <= 1e-6);
  CHECK(cake::testing::max_abs_diff(streamed.hidden, head.hidden) <= 1e-6);
}

TEST_CASE("probe: teacher head on its own features reproduces teacher accuracy; bad configs rejected") {
  Fixture fx;
  const double acc = teacher_accuracy(fx.teacher, fx.data.train, fx.mc.t_clip);
  NoGradGuard ng;
  auto ws = action_windows(fx.data.train, fx.mc.t_clip);
  std::size_t hits = 0;
  for (const auto& w : ws) {
    auto flow = reshape(fx.data.train.clips[w.clip].flow_window(w.start, fx.mc.t_clip),
                        {1, 2, fx.mc.t_clip, 16, 16});
    auto z = teacher_forward(fx.teacher, flow).z;
    auto logits = fx.teacher.head.forward(z);
    auto row = logits.data();
    hits += std::size_t(std::max_element(row.begin(), row.end()) - row.begin()) == std::size_t(w.label - 1);
  }
  CHECK(acc == double(hits) / double(ws.size()));

  ModelConfig no_dma = fx.mc;
  no_dma.use_dma = false;
  Rng r(1);
  auto plain = Student<float>::init(no_dma, r);
  CHECK_THROWS_AS(probe_dma_with_teacher_head(plain, fx.teacher, fx.data.test), ContractError);
  ModelConfig wide = fx.mc;
  wide.d_feat = 16;
  auto other = Student<float>::init(wide, r);
  CHECK_THROWS_AS(probe_dma_with_teacher_head(other, fx.teacher, fx.data.test), ContractError);
}

TEST_CASE("stage 1: deterministic, teacher-independent when the distill weight is zero") {
  Fixture fx;
  auto cfg = quick_train();
  auto a = fx.student(21), b = fx.student(21);
  train_stage1(a, fx.teacher, fx.data.train, cfg, 3);
  train_stage1(b, fx.teacher, fx.data.train, cfg, 3);
  CHECK(snapshot(a) == snapshot(b));

  cfg.loss.distill = 0.0;
  Rng other_rng(999);
  auto other_teacher = Teacher<float>::init(fx.mc, other_rng);
  auto c = fx.student(21), d = fx.student(21);
  train_stage1(c, fx.teacher, fx.data.train, cfg, 3);
  train_stage1(d, other_teacher, fx.data.train, cfg, 3);
  CHECK(snapshot(c) == snapshot(d));
  CHECK(snapshot(c) != snapshot(a));
}

TEST_CASE("stage 1: only backbone, DMA and pretraining head change; metrics are logged") {
  Fixture fx;
  auto s = fx.student(22);
  auto before = snapshot(s);
  std::vector<MetricRecord> log;
  train_stage1(s, fx.teacher, fx.data.train, quick_train(), 4, [&](const MetricRecord& r) { log.push_back(r); },
               &fx.data.test);
  auto after = snapshot(s);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& n = before[i].first;
    const bool own = starts_with(n, "backbone.") || starts_with(n, "dma.") || starts_with(n, "pretrain_head.");
    if (!own) CHECK_MESSAGE(before[i].second == after[i].second, n);
  }
  REQUIRE(log.size() == 1);
  CHECK(log[0].stage == "stage1");
  for (const char* k : {"loss", "ce", "distill", "train_acc", "probe"}) CHECK(std::isfinite(log[0].get(k)));
  for (auto& p : s.params({""})) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("stage 1: a non-finite loss aborts with the stage, epoch and step") {
  Fixture fx;
  auto data = fx.data.train;
  for (auto& v : data.clips[0].frames.mutable_data()) v = std::numeric_limits<float>::quiet_NaN();
  auto s = fx.student(23);
  try {
    train_stage1(s, fx.teacher, data, quick_train(), 5);
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stage1") != std::string::npos);
    CHECK(msg.find("epoch 0") != std::string::npos);
    CHECK(msg.find("step") != std::string::npos);
  }
}

TEST_CASE("stage 2: separable streams reach >= 95% final-step accuracy; queue fills and stays full") {
  ModelConfig m;
  m.d_feat = 8;
  Rng rng(31);
  auto s = Student<float>::init(m, rng);
  auto set = separable_streams(8, m.fused_dim(), m.classes, 32);
  TrainConfig cfg = quick_train();
  cfg.stage2.epochs = 12;
  cfg.stage2.lr = 1e-2;
  cfg.chunks_per_epoch = 64;
  cfg.queue_size = 48;
  auto before = snapshot(s);
  std::vector<double> queue;
  auto report = train_stage2(s, set, cfg, 7, [&](const MetricRecord& r) { queue.push_back(r.get("queue")); });
  CHECK(report.final_step_accuracy >= 0.95);
  CHECK(report.queue_size == cfg.queue_size);
  bool full = false;
  for (double q : queue) {
    if (full) CHECK(q == double(cfg.queue_size));
    full |= q == double(cfg.queue_size);
  }
  CHECK(full);
  auto after = snapshot(s);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& n = before[i].first;
    if (!(starts_with(n, "gru.") || starts_with(n, "proj.") || starts_with(n, "classifier.")))
      CHECK_MESSAGE(before[i].second == after[i].second, n);
  }
}

TEST_CASE("stage 2 without the contrast term is the masked objective alone") {
  ModelConfig m;
  m.d_feat = 8;
  Rng rng(33);
  auto s = Student<float>::init(m, rng);
  auto set = separable_streams(4, m.fused_dim(), m.classes, 34);
  TrainConfig cfg = quick_train();
  cfg.loss.contrast = 0.0;
  auto before = snapshot(s);
  std::vector<MetricRecord> log;
  auto report = train_stage2(s, set, cfg, 8, [&](const MetricRecord& r) { log.push_back(r); });
  CHECK(report.queue_size == 0);
  for (const auto& r : log) {
    CHECK(r.get("loss") == r.get("ce"));
    CHECK(r.get("contrast") == 0.0);
  }
  auto after = snapshot(s);
  for (std::size_t i = 0; i < before.size(); ++i)
    if (starts_with(before[i].first, "proj.")) CHECK(before[i].second == after[i].second);
}

TEST_CASE("stage 3: only the classifier changes; focal(0, 1) follows the cross-entropy trajectory") {
  ModelConfig m;
  m.d_feat = 8;
  Rng rng(35);
  auto base = Student<float>::init(m, rng);
  auto set = separable_streams(4, m.fused_dim(), m.classes, 36);
  TrainConfig cfg = quick_train();
  cfg.stage3.epochs = 3;
  auto before = snapshot(base);

  auto run = [&](StepLoss loss, double gamma, double alpha) {
    Rng r(35);
    auto s = Student<float>::init(m, r);
    TrainConfig c = cfg;
    c.stage3_loss = loss;
    c.loss.focal_gamma = gamma;
    c.loss.focal_alpha = alpha;
    std::vector<double> losses;
    train_stage3(s, set, c, 9, [&](const MetricRecord& rec) { losses.push_back(rec.get("loss")); });
    return std::pair{snapshot(s), losses};
  };
  auto [focal, focal_losses] = run(StepLoss::focal, 0.0, 1.0);
  auto [ce, ce_losses] = run(StepLoss::cross_entropy, 2.0, 0.25);
  REQUIRE(focal.size() == ce.size());
  for (std::size_t i = 0; i < focal.size(); ++i)
    CHECK(cake::testing::max_abs_diff(focal[i].second, ce[i].second) <= 1e-6);
  for (std::size_t e = 0; e < ce_losses.size(); ++e) CHECK(std::abs(focal_losses[e] - ce_losses[e]) <= 1e-6);

  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool cls = starts_with(before[i].first, "classifier.");
    if (cls) CHECK(before[i].second != focal[i].second);
    else CHECK(before[i].second == focal[i].second);
  }
}

TEST_CASE("evaluate_streams concatenates run_head tracks") {
  ModelConfig m;
  m.d_feat = 8;
  Rng rng(37);
  auto s = Student<float>::init(m, rng);
  auto set = separable_streams(3, m.fused_dim(), m.classes, 38);
  auto all = evaluate_streams(s, set);
  std::vector<float> expect;
  for (std::size_t c = 0; c < set.size(); ++c) {
    auto t = run_head(s, set.features[c], set.labels[c]).track.scores;
    expect.insert(expect.end(), t.begin(), t.end());
  }
  CHECK(all.scores == expect);
}

TEST_CASE("config validation rejects bad stage options") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.stage2.lr = 0;
  CHECK_THROWS_AS(t.validate(), ContractError);
  t = {};
  t.stage1.momentum = 1.0;
  CHECK_THROWS_AS(t.validate(), ContractError);
  t = {};
  t.queue_size = 0;
  CHECK_THROWS_AS(t.validate(), ContractError);
}
