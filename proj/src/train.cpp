// SPDX-License-Identifier: Apache-2.0

#include "cake/train.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>

#include "cake/autograd.hpp"
#include "cake/ops.hpp"
#include "cake/optim.hpp"
#include "cake/stream.hpp"

namespace cake {

void StageOptions::validate(const std::string& stage) const {
  if (epochs == 0) throw ContractError(stage + ": epochs must be >= 1");
  if (batch == 0) throw ContractError(stage + ": batch must be >= 1");
  if (!(lr > 0.0)) throw ContractError(stage + ": lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError(stage + ": momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ContractError(stage + ": weight decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw ContractError(stage + ": grad_clip must be >= 0");
}

void TrainConfig::validate() const {
  teacher.validate("teacher");
  stage1.validate("stage1");
  stage2.validate("stage2");
  stage3.validate("stage3");
  loss.validate();
  if (queue_size == 0) throw ContractError("queue_size must be >= 1");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ContractError("ema_momentum must lie in [0, 1]");
  if (chunks_per_epoch == 0) throw ContractError("chunks_per_epoch must be >= 1");
}

double MetricRecord::get(const std::string& key) const {
  for (const auto& [k, v] : values)
    if (k == key) return v;
  throw ContractError("metric record has no value '" + key + "'");
}

namespace {

std::size_t batches(std::size_t items, std::size_t batch) { return (items + batch - 1) / batch; }

class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, const StageOptions& o, std::size_t total_steps)
      : clip_(o.grad_clip), lr_(o.lr), cosine_(o.cosine), total_(total_steps) {
    if (o.optimizer == OptimizerKind::sgd)
      sgd_ = std::make_unique<Sgd>(std::move(params), SgdOptions{o.lr, o.momentum, o.weight_decay});
    else
      adam_ = std::make_unique<AdamW>(std::move(params), AdamWOptions{o.lr, 0.9, 0.999, 1e-8, o.weight_decay});
  }
  void step() {
    const auto& ps = sgd_ ? sgd_->params() : adam_->params();
    if (clip_ > 0.0) clip_grad_norm(ps, clip_);
    if (cosine_) {
      const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * double(std::min(step_, total_)) / double(total_)));
      if (sgd_) sgd_->set_lr(lr_ * f); else adam_->set_lr(lr_ * f);
    }
    ++step_;
    if (sgd_) sgd_->step(); else adam_->step();
  }
  void zero_grad() {
    if (sgd_) sgd_->zero_grad(); else adam_->zero_grad();
  }

 private:
  double clip_, lr_;
  bool cosine_;
  std::size_t total_, step_ = 0;
  std::unique_ptr<Sgd> sgd_;
  std::unique_ptr<AdamW> adam_;
};

void check_finite(double loss, const std::string& stage, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss))
    throw TrainingDiverged(stage + ": loss became " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step));
}

void emit(const MetricsSink& sink, MetricRecord rec) {
  if (sink) sink(rec);
}

std::vector<Tensor> all_params(const Teacher<float>& t) {
  NamedParams<float> named;
  t.collect(named);
  std::vector<Tensor> out;
  for (auto& [n, p] : named) out.push_back(p);
  return out;
}

// Freezes everything, then unfreezes the parameters under `prefixes`.
std::vector<Tensor> select_trainable(const Student<float>& s, const std::vector<std::string>& prefixes) {
  set_trainable(s.params({""}), false);
  auto ps = s.params(prefixes);
  set_trainable(ps, true);
  return ps;
}

Tensor batch_of(const std::vector<Tensor>& items) {
  std::vector<Tensor> parts;
  parts.reserve(items.size());
  for (const auto& x : items) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    parts.push_back(reshape(x, s));
  }
  return concat(parts, 0);
}

Tensor rgb_batch(const Dataset& ds, const std::vector<ActionWindow>& ws, std::size_t len) {
  std::vector<Tensor> items;
  for (const auto& w : ws) items.push_back(ds.clips[w.clip].frame_window(w.start, len));
  return batch_of(items);
}

Tensor flow_batch(const Dataset& ds, const std::vector<ActionWindow>& ws, std::size_t len) {
  std::vector<Tensor> items;
  for (const auto& w : ws) items.push_back(ds.clips[w.clip].flow_window(w.start, len));
  return batch_of(items);
}

// Action labels 1..K become class indices 0..K-1.
std::vector<Label> class_targets(const std::vector<ActionWindow>& ws) {
  std::vector<Label> y;
  for (const auto& w : ws) y.push_back(Label(w.label - 1));
  return y;
}

std::size_t argmax_row(std::span<const float> row) {
  return std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
}

std::size_t count_correct(const Tensor& logits, const std::vector<Label>& y) {
  const std::size_t C = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t n = 0; n < y.size(); ++n)
    hits += argmax_row(logits.data().subspan(n * C, C)) == y[n];
  return hits;
}

template <class F>
void for_batches(const std::vector<ActionWindow>& ws, std::size_t batch, F&& f) {
  for (std::size_t b = 0; b < ws.size(); b += batch)
    f(std::vector<ActionWindow>(ws.begin() + long(b), ws.begin() + long(std::min(ws.size(), b + batch))));
}

constexpr std::size_t kEvalBatch = 16;

// Sampled training chunks: `length` consecutive frames ending at `end`.
struct Chunk {
  std::size_t clip, end;
};

std::vector<Chunk> sample_chunks(const StreamSet& set, std::size_t length, std::size_t count, Rng& rng) {
  std::vector<Chunk> out;
  out.reserve(count);
  std::uniform_int_distribution<std::size_t> pick_clip(0, set.size() - 1);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = pick_clip(rng);
    const std::size_t T = set.labels[c].size();
    if (T < length) throw ContractError("clip shorter than the training chunk length");
    std::uniform_int_distribution<std::size_t> pick_end(length - 1, T - 1);
    out.push_back({c, pick_end(rng)});
  }
  return out;
}

// Time-major chunk batch: inputs[t] is [B, F]; labels are ordered (t, b).
struct ChunkBatch {
  std::vector<Tensor> inputs;
  std::vector<Label> labels;
  std::vector<Label> final_labels;
};

ChunkBatch gather(const StreamSet& set, const std::vector<Chunk>& chunks, std::size_t length) {
  ChunkBatch out;
  const std::size_t B = chunks.size(), F = set.features.front().dim(1);
  for (std::size_t t = 0; t < length; ++t) {
    std::vector<float> x;
    x.reserve(B * F);
    for (const auto& c : chunks) {
      const std::size_t row = c.end + 1 - length + t;
      auto src = set.features[c.clip].data().subspan(row * F, F);
      x.insert(x.end(), src.begin(), src.end());
      out.labels.push_back(set.labels[c.clip][row]);
    }
    out.inputs.emplace_back(Shape{B, F}, std::move(x));
  }
  for (const auto& c : chunks) out.final_labels.push_back(set.labels[c.clip][c.end]);
  return out;
}

Tensor run_gru(const GruCell<float>& gru, const std::vector<Tensor>& xs, std::vector<Tensor>* states) {
  auto h = Tensor::zeros({xs.front().dim(0), gru.hidden_size()});
  for (const auto& x : xs) {
    h = gru_step(gru, x, h);
    if (states) states->push_back(h);
  }
  return h;
}

GruCell<float> detached(const GruCell<float>& c) {
  GruCell<float> k = c;
  for (auto* p : {&k.w_z, &k.w_r, &k.w_n, &k.u_z, &k.u_r, &k.u_n, &k.b_z, &k.b_r, &k.b_n, &k.b_hn}) *p = p->detach();
  return k;
}

LinearLayer<float> detached(const LinearLayer<float>& l) {
  return {l.weight.detach(), l.bias.detach()};
}

void check_stream_set(const Student<float>& s, const StreamSet& set, std::size_t length) {
  if (set.size() == 0) throw ContractError("empty training stream set");
  for (const auto& f : set.features)
    if (f.rank() != 2 || f.dim(1) != s.cfg.fused_dim() || f.dim(0) < length)
      throw ShapeError("stream features " + shape_str(f.shape()) + " do not fit fused dim " +
                       std::to_string(s.cfg.fused_dim()) + " and chunk length " + std::to_string(length));
}

}  // namespace

void train_teacher(Teacher<float>& teacher, const Dataset& train, std::size_t t_clip, const TrainConfig& cfg,
                   std::uint64_t seed, const MetricsSink& sink) {
  cfg.validate();
  auto windows = action_windows(train, t_clip);
  if (windows.empty()) throw ContractError("teacher: no action windows of length " + std::to_string(t_clip));
  auto params = all_params(teacher);
  set_trainable(params, true);
  Optimizer opt(params, cfg.teacher, cfg.teacher.epochs * batches(windows.size(), cfg.teacher.batch));
  Rng rng(seed);
  for (std::size_t epoch = 0; epoch < cfg.teacher.epochs; ++epoch) {
    std::shuffle(windows.begin(), windows.end(), rng);
    double total = 0.0;
    std::size_t hits = 0, step = 0;
    for_batches(windows, cfg.teacher.batch, [&](const std::vector<ActionWindow>& ws) {
      GradTape tape;
      auto y = class_targets(ws);
      auto out = teacher_forward(teacher, flow_batch(train, ws, t_clip));
      auto loss = cross_entropy(out.logits, y);
      check_finite(loss.item(), "teacher", epoch, step++);
      backward(loss);
      opt.step();
      opt.zero_grad();
      total += double(loss.item()) * double(ws.size());
      hits += count_correct(out.logits, y);
    });
    emit(sink, {"teacher", epoch,
                {{"loss", total / double(windows.size())}, {"train_acc", double(hits) / double(windows.size())}}});
  }
  set_trainable(params, false);
}

double teacher_accuracy(const Teacher<float>& teacher, const Dataset& ds, std::size_t t_clip) {
  NoGradGuard no_grad;
  auto windows = action_windows(ds, t_clip);
  if (windows.empty()) throw ContractError("teacher_accuracy: no action windows");
  std::size_t hits = 0;
  for_batches(windows, kEvalBatch, [&](const std::vector<ActionWindow>& ws) {
    hits += count_correct(teacher_forward(teacher, flow_batch(ds, ws, t_clip)).logits, class_targets(ws));
  });
  return double(hits) / double(windows.size());
}

double probe_dma_with_teacher_head(const Student<float>& student, const Teacher<float>& teacher, const Dataset& ds) {
  if (!student.cfg.use_dma) throw ContractError("probe: the student has no DMA branch");
  if (teacher.head.in_features() != student.cfg.d_feat)
    throw ContractError("probe: z_motion has " + std::to_string(student.cfg.d_feat) + " features, teacher head expects " +
                        std::to_string(teacher.head.in_features()));
  NoGradGuard no_grad;
  const std::size_t L = student.cfg.t_clip;
  auto windows = action_windows(ds, L);
  if (windows.empty()) throw ContractError("probe: no action windows");
  std::size_t hits = 0;
  for_batches(windows, kEvalBatch, [&](const std::vector<ActionWindow>& ws) {
    auto z = student_forward(student, rgb_batch(ds, ws, L)).z_motion;
    hits += count_correct(teacher.head.forward(z), class_targets(ws));
  });
  return double(hits) / double(windows.size());
}

void train_stage1(Student<float>& student, const Teacher<float>& teacher, const Dataset& train,
                  const TrainConfig& cfg, std::uint64_t seed, const MetricsSink& sink, const Dataset* probe) {
  cfg.validate();
  const std::size_t L = student.cfg.t_clip;
  const bool distill = student.cfg.use_dma;
  if (distill && teacher.head.in_features() != student.cfg.d_feat)
    throw ContractError("stage1: teacher and student feature dims differ");
  auto windows = action_windows(train, L);
  if (windows.empty()) throw ContractError("stage1: no action windows of length " + std::to_string(L));

  // The teacher is frozen; its targets are computed once per window.
  std::vector<Tensor> teacher_z(windows.size());
  if (distill) {
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < windows.size(); ++i)
      teacher_z[i] = select(teacher_forward(teacher, flow_batch(train, {windows[i]}, L)).z, 0);
  }
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto params = select_trainable(student, {"backbone.", "dma.", "pretrain_head."});
  Optimizer opt(params, cfg.stage1, cfg.stage1.epochs * batches(windows.size(), cfg.stage1.batch));
  Rng rng(seed);
  const std::size_t B = cfg.stage1.batch;
  for (std::size_t epoch = 0; epoch < cfg.stage1.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0, ce_sum = 0.0, distill_sum = 0.0;
    std::size_t hits = 0, step = 0;
    for (std::size_t b = 0; b < order.size(); b += B) {
      std::vector<ActionWindow> ws;
      std::vector<Tensor> zt;
      for (std::size_t i = b; i < std::min(order.size(), b + B); ++i) {
        ws.push_back(windows[order[i]]);
        if (distill) zt.push_back(teacher_z[order[i]]);
      }
      GradTape tape;
      auto y = class_targets(ws);
      auto out = student_forward(student, rgb_batch(train, ws, L));
      auto ce = cross_entropy(out.logits, y);
      auto loss = ce;
      double d = 0.0;
      if (distill) {
        auto dl = distill_loss(stack(zt), out.z_motion);
        d = dl.item();
        if (cfg.loss.distill != 0.0) loss = add(ce, scale(dl, float(cfg.loss.distill)));
      }
      check_finite(loss.item(), "stage1", epoch, step++);
      backward(loss);
      opt.step();
      opt.zero_grad();
      const double n = double(ws.size());
      total += loss.item() * n;
      ce_sum += ce.item() * n;
      distill_sum += d * n;
      hits += count_correct(out.logits, y);
    }
    const double n = double(windows.size());
    MetricRecord rec{"stage1", epoch,
                     {{"loss", total / n}, {"ce", ce_sum / n}, {"distill", distill_sum / n},
                      {"train_acc", double(hits) / n}}};
    if (probe && distill) rec.values.emplace_back("probe", probe_dma_with_teacher_head(student, teacher, *probe));
    emit(sink, std::move(rec));
  }
  set_trainable(params, false);
}

StreamSet precompute_features(const Student<float>& student, const Dataset& ds) {
  StreamSet out;
  for (const auto& clip : ds.clips) {
    out.features.push_back(stream_features(student, clip));
    out.labels.push_back(clip.labels);
  }
  return out;
}

Stage2Report train_stage2(Student<float>& student, const StreamSet& train, const TrainConfig& cfg,
                          std::uint64_t seed, const MetricsSink& sink, const StreamSet* val) {
  cfg.validate();
  const std::size_t L = cfg.loss.clip_length;
  check_stream_set(student, train, L);
  const bool contrast = cfg.loss.contrast != 0.0;

  auto params = select_trainable(student, {"gru.", "proj.", "classifier."});
  Optimizer opt(params, cfg.stage2, cfg.stage2.epochs * batches(cfg.chunks_per_epoch, cfg.stage2.batch));

  // Key network: an EMA copy of GRU + projection.
  auto key_gru = detached(student.gru);
  auto key_p1 = detached(student.proj1), key_p2 = detached(student.proj2);
  MomentumEncoderState ema;
  ema.momentum = cfg.ema_momentum;
  {
    NamedParams<float> q, k;
    student.gru.collect(q, "gru");
    student.proj1.collect(q, "proj.0");
    student.proj2.collect(q, "proj.1");
    key_gru.collect(k, "gru");
    key_p1.collect(k, "proj.0");
    key_p2.collect(k, "proj.1");
    for (auto& [n, p] : q) ema.query_params.push_back(p);
    for (auto& [n, p] : k) ema.key_params.push_back(p);
  }
  ContrastQueue queue(cfg.queue_size, student.cfg.proj_dim);

  Rng rng(seed);
  Stage2Report report;
  const std::size_t B = cfg.stage2.batch;
  for (std::size_t epoch = 0; epoch < cfg.stage2.epochs; ++epoch) {
    auto chunks = sample_chunks(train, L, cfg.chunks_per_epoch, rng);
    double total = 0.0, ce_sum = 0.0, con_sum = 0.0;
    std::size_t hits = 0, step = 0;
    for (std::size_t b = 0; b < chunks.size(); b += B) {
      std::vector<Chunk> part(chunks.begin() + long(b), chunks.begin() + long(std::min(chunks.size(), b + B)));
      auto batch = gather(train, part, L);
      GradTape tape;
      std::vector<Tensor> hs;
      auto h_last = run_gru(student.gru, batch.inputs, &hs);
      std::vector<Tensor> logits;
      for (const auto& h : hs) logits.push_back(student.classifier.forward(h));
      auto ce = masked_temporal_loss(stack(logits), batch.labels, StepLoss::cross_entropy, cfg.loss.focal_gamma,
                                     cfg.loss.focal_alpha, true);
      auto loss = ce;
      double con = 0.0;
      Tensor k_plus;
      if (contrast) {
        auto q = project(student.proj1, student.proj2, h_last);
        {
          NoGradGuard no_grad;
          k_plus = project(key_p1, key_p2, run_gru(key_gru, batch.inputs, nullptr));
        }
        auto c = floating_supcon_loss(q, batch.final_labels, k_plus, queue, cfg.loss, cfg.contrast_mode);
        con = c.item();
        loss = add(ce, scale(c, float(cfg.loss.contrast)));
      }
      check_finite(loss.item(), "stage2", epoch, step++);
      backward(loss);
      opt.step();
      opt.zero_grad();
      if (contrast) {
        ema_update(ema);
        queue.push(k_plus, batch.final_labels);
      }
      const double n = double(part.size());
      total += loss.item() * n;
      ce_sum += ce.item() * n;
      con_sum += con * n;
      hits += count_correct(logits.back(), batch.final_labels);
    }
    const double n = double(chunks.size());
    report.final_step_accuracy = double(hits) / n;
    report.queue_size = queue.size();
    MetricRecord rec{"stage2", epoch,
                     {{"loss", total / n}, {"ce", ce_sum / n}, {"contrast", con_sum / n},
                      {"train_acc", report.final_step_accuracy}, {"queue", double(queue.size())}}};
    if (val) rec.values.emplace_back("val_map", per_frame_map(evaluate_streams(student, *val)));
    emit(sink, std::move(rec));
  }
  set_trainable(params, false);
  return report;
}

void train_stage3(Student<float>& student, const StreamSet& train, const TrainConfig& cfg, std::uint64_t seed,
                  const MetricsSink& sink, const StreamSet* val) {
  cfg.validate();
  const std::size_t L = cfg.loss.clip_length;
  check_stream_set(student, train, L);
  auto params = select_trainable(student, {"classifier."});
  Optimizer opt(params, cfg.stage3, cfg.stage3.epochs * batches(cfg.chunks_per_epoch, cfg.stage3.batch));
  Rng rng(seed);
  const std::size_t B = cfg.stage3.batch;
  for (std::size_t epoch = 0; epoch < cfg.stage3.epochs; ++epoch) {
    auto chunks = sample_chunks(train, L, cfg.chunks_per_epoch, rng);
    double total = 0.0;
    std::size_t hits = 0, step = 0;
    for (std::size_t b = 0; b < chunks.size(); b += B) {
      std::vector<Chunk> part(chunks.begin() + long(b), chunks.begin() + long(std::min(chunks.size(), b + B)));
      auto batch = gather(train, part, L);
      std::vector<Tensor> hs;
      {
        NoGradGuard no_grad;
        run_gru(student.gru, batch.inputs, &hs);
      }
      GradTape tape;
      std::vector<Tensor> logits;
      for (const auto& h : hs) logits.push_back(student.classifier.forward(h));
      auto loss = masked_temporal_loss(stack(logits), batch.labels, cfg.stage3_loss, cfg.loss.focal_gamma,
                                       cfg.loss.focal_alpha, true);
      check_finite(loss.item(), "stage3", epoch, step++);
      backward(loss);
      opt.step();
      opt.zero_grad();
      total += loss.item() * double(part.size());
      hits += count_correct(logits.back(), batch.final_labels);
    }
    const double n = double(chunks.size());
    MetricRecord rec{"stage3", epoch, {{"loss", total / n}, {"train_acc", double(hits) / n}}};
    if (val) rec.values.emplace_back("val_map", per_frame_map(evaluate_streams(student, *val)));
    emit(sink, std::move(rec));
  }
  set_trainable(params, false);
}

ScoreTrack evaluate_streams(const Student<float>& student, const StreamSet& set) {
  ScoreTrack track;
  track.num_classes = student.cfg.classes + 1;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto part = run_head(student, set.features[i], set.labels[i]).track;
    track.scores.insert(track.scores.end(), part.scores.begin(), part.scores.end());
    track.labels.insert(track.labels.end(), part.labels.begin(), part.labels.end());
  }
  return track;
}

}  // namespace cake
