// SPDX-License-Identifier: Apache-2.0

#include "cake/models.hpp"

#include <cmath>

#include "cake/data.hpp"
#include "cake/ops.hpp"

namespace cake {

ModelConfig ModelConfig::paper_preset() {
  ModelConfig c;
  c.d_feat = 192;
  c.backbone_widths = {24, 48};
  c.teacher_widths = {24, 48};
  c.t_clip = 13;
  c.gru_hidden = 1024;
  c.proj_dim = 128;
  c.reduction = 1.0 / 16.0;
  return c;
}

void ModelConfig::validate() const {
  if (classes < 2 || classes > 8) throw ConfigError("model.classes must lie in [2, 8]");
  if (d_feat == 0 || gru_hidden == 0 || proj_dim == 0 || t_clip == 0)
    throw ConfigError("model dimensions must be positive");
  if (backbone_pool.size() != backbone_widths.size() + 1)
    throw ConfigError("model.backbone_pool needs one entry per backbone block");
  if (teacher_widths.size() != backbone_widths.size())
    throw ConfigError("model.teacher_widths must have as many blocks as the backbone");
  for (auto w : backbone_widths)
    if (w == 0) throw ConfigError("backbone widths must be positive");
  if (kernels == 0) throw ConfigError("model.kernels must be positive");
  if (use_dma) {
    try {
      dma_config().attention_hidden(d_feat);  // every DMA layer reads d_feat channels
    } catch (const ContractError& e) {
      throw ConfigError(std::string("model.reduction: ") + e.what());
    }
  }
}

DmaConfig ModelConfig::dma_config() const {
  DmaConfig d;
  d.reduction = reduction;
  d.d_feat = d_feat;
  d.kernels = kernels;
  d.dynamic = dynamic;
  d.dynamic_hallucination = dynamic_hallucination;
  return d;
}

template <class T>
Backbone<T> Backbone<T>::init(std::size_t in_channels, const std::vector<std::size_t>& widths,
                              std::size_t out_channels, const std::vector<bool>& pool, Rng& rng) {
  Backbone b;
  b.pool = pool;
  std::size_t cin = in_channels;
  for (std::size_t i = 0; i <= widths.size(); ++i) {
    const std::size_t cout = i < widths.size() ? widths[i] : out_channels;
    Conv3dSpec s{cin, cout, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}, 1};
    s.validate();
    b.specs.push_back(s);
    b.weights.push_back(uniform_param<T>(s.weight_shape(), std::sqrt(6.0 / double(cin * 9)), rng));
    cin = cout;
  }
  return b;
}

template <class T>
BasicTensor<T> Backbone<T>::forward(const BasicTensor<T>& x) const {
  BasicTensor<T> h = x;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    h = relu(conv3d(h, weights[i], specs[i]));
    if (pool[i]) h = avg_pool3d(h, {1, 2, 2});
  }
  return h;
}

template <class T>
void Backbone<T>::collect(NamedParams<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < weights.size(); ++i) out.emplace_back(prefix + ".conv" + std::to_string(i), weights[i]);
}

template <class T>
Teacher<T> Teacher<T>::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Teacher t;
  t.backbone = Backbone<T>::init(2, cfg.teacher_widths, cfg.d_feat, cfg.backbone_pool, rng);
  t.head = LinearLayer<T>::init(cfg.d_feat, cfg.classes, rng);
  return t;
}

template <class T>
void Teacher<T>::collect(NamedParams<T>& out) const {
  backbone.collect(out, "teacher.backbone");
  head.collect(out, "teacher.head");
}

template <class T>
TeacherOutput<T> teacher_forward(const Teacher<T>& teacher, const BasicTensor<T>& flow) {
  if (flow.rank() != 5 || flow.dim(1) != 2) throw ShapeError("teacher_forward: flow " + shape_str(flow.shape()));
  auto z = global_avg_pool(teacher.backbone.forward(flow));
  return {z, teacher.head.forward(z)};
}

template <class T>
Student<T> Student<T>::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Student s;
  s.cfg = cfg;
  s.backbone = Backbone<T>::init(3, cfg.backbone_widths, cfg.d_feat, cfg.backbone_pool, rng);
  if (cfg.use_dma) s.dma = Dma<T>::init(cfg.d_feat, cfg.dma_config(), rng);
  s.pretrain_head = LinearLayer<T>::init(cfg.fused_dim(), cfg.classes, rng);
  s.gru = GruCell<T>::init(cfg.fused_dim(), cfg.gru_hidden, rng);
  s.proj1 = LinearLayer<T>::init(cfg.gru_hidden, cfg.gru_hidden, rng);
  s.proj2 = LinearLayer<T>::init(cfg.gru_hidden, cfg.proj_dim, rng);
  s.classifier = LinearLayer<T>::init(cfg.gru_hidden, cfg.classes + 1, rng);
  return s;
}

template <class T>
void Student<T>::collect(NamedParams<T>& out) const {
  backbone.collect(out, "backbone");
  if (cfg.use_dma) dma.collect(out, "dma");
  pretrain_head.collect(out, "pretrain_head");
  gru.collect(out, "gru");
  proj1.collect(out, "proj.0");
  proj2.collect(out, "proj.1");
  classifier.collect(out, "classifier");
}

template <class T>
std::vector<BasicTensor<T>> Student<T>::params(const std::vector<std::string>& prefixes) const {
  NamedParams<T> all;
  collect(all);
  std::vector<BasicTensor<T>> out;
  for (auto& [name, p] : all)
    for (const auto& pre : prefixes)
      if (name.rfind(pre, 0) == 0) {
        out.push_back(p);
        break;
      }
  return out;
}

template <class T>
StudentOutput<T> clip_features(const Student<T>& s, const BasicTensor<T>& z_static_map) {
  StudentOutput<T> o;
  o.z_static_map = z_static_map;
  o.z_static_vec = global_avg_pool(z_static_map);
  if (s.cfg.use_dma) {
    o.z_motion = dma_forward(z_static_map, s.dma);
    o.fused = fuse_features(o.z_static_vec, o.z_motion);
  } else {
    o.fused = o.z_static_vec;
  }
  return o;
}

template <class T>
StudentOutput<T> student_forward(const Student<T>& s, const BasicTensor<T>& rgb) {
  if (rgb.rank() != 5 || rgb.dim(1) != 3) throw ShapeError("student_forward: rgb " + shape_str(rgb.shape()));
  if (rgb.dim(2) != s.cfg.t_clip)
    throw ContractError("student_forward: clip has " + std::to_string(rgb.dim(2)) + " frames, expected " +
                        std::to_string(s.cfg.t_clip));
  auto o = clip_features(s, s.backbone.forward(rgb));
  o.logits = s.pretrain_head.forward(o.fused);
  return o;
}

template <class T>
BasicTensor<T> project(const LinearLayer<T>& p1, const LinearLayer<T>& p2, const BasicTensor<T>& h) {
  return l2_normalize_rows(p2.forward(relu(p1.forward(h))));
}

template <class T>
void set_trainable(const std::vector<BasicTensor<T>>& params, bool on) {
  for (auto p : params) {
    p.set_requires_grad(on);
    if (!on) p.zero_grad();
  }
}

#define CAKE_INSTANTIATE_MODELS(T)                                                                   \
  template struct Backbone<T>;                                                                       \
  template struct Teacher<T>;                                                                        \
  template struct Student<T>;                                                                        \
  template TeacherOutput<T> teacher_forward(const Teacher<T>&, const BasicTensor<T>&);               \
  template StudentOutput<T> clip_features(const Student<T>&, const BasicTensor<T>&);                 \
  template StudentOutput<T> student_forward(const Student<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> project(const LinearLayer<T>&, const LinearLayer<T>&, const BasicTensor<T>&); \
  template void set_trainable(const std::vector<BasicTensor<T>>&, bool);

CAKE_INSTANTIATE_MODELS(float)
CAKE_INSTANTIATE_MODELS(double)

}  // namespace cake
