// SPDX-License-Identifier: Apache-2.0
//
// Teacher and student networks.
//
// The static backbone is a stack of conv -> ReLU -> optional 2x2 spatial
// average-pool blocks with 1x3x3 kernels, so every output frame depends on
// its own input frame only; the streaming engine relies on this to cache
// per-frame backbone maps. Temporal reasoning happens in the DMA and the GRU.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cake/losses.hpp"
#include "cake/nn.hpp"
#include "cake/odconv.hpp"
#include "cake/tensor.hpp"

namespace cake {

struct ModelConfig {
  std::size_t classes = 4;  // K action classes; the online classifier has K + 1 outputs
  std::size_t d_feat = 32;
  /// Output widths of every backbone block but the last, which emits d_feat.
  std::vector<std::size_t> backbone_widths{16, 32};
  /// One flag per block (backbone_widths.size() + 1 entries).
  std::vector<bool> backbone_pool{true, true, false};
  std::vector<std::size_t> teacher_widths{16, 32};
  std::size_t t_clip = 8;
  std::size_t gru_hidden = 64;
  std::size_t proj_dim = 32;
  bool use_dma = true;
  double reduction = 1.0 / 8.0;
  std::size_t kernels = 4;
  bool dynamic = true;
  bool dynamic_hallucination = true;

  /// Settings of the reference X3D-scale model: 13-frame clips, 192-d
  /// features, GRU hidden 1024, reduction 1/16, 128-d projections.
  static ModelConfig paper_preset();
  void validate() const;
  DmaConfig dma_config() const;
  std::size_t fused_dim() const { return use_dma ? 2 * d_feat : d_feat; }
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct Backbone {
  std::vector<Conv3dSpec> specs;
  std::vector<BasicTensor<T>> weights;
  std::vector<bool> pool;

  static Backbone init(std::size_t in_channels, const std::vector<std::size_t>& widths, std::size_t out_channels,
                       const std::vector<bool>& pool, Rng& rng);
  /// [N, C_in, T, H, W] -> [N, out, T, H', W'].
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  std::size_t out_channels() const { return specs.back().out_channels; }
  void collect(NamedParams<T>& out, const std::string& prefix) const;
};

template <class T>
struct TeacherOutput {
  BasicTensor<T> z;       // [N, D_feat]
  BasicTensor<T> logits;  // [N, K]
};

template <class T>
struct Teacher {
  Backbone<T> backbone;  // over 2-channel flow
  LinearLayer<T> head;   // D_feat -> K

  static Teacher init(const ModelConfig& cfg, Rng& rng);
  void collect(NamedParams<T>& out) const;
};

/// flow: [N, 2, T, H, W].
template <class T>
TeacherOutput<T> teacher_forward(const Teacher<T>& teacher, const BasicTensor<T>& flow);

template <class T>
struct StudentOutput {
  BasicTensor<T> z_static_map;  // [N, D, T, h, w]
  BasicTensor<T> z_static_vec;  // [N, D]
  BasicTensor<T> z_motion;      // [N, D], undefined without DMA
  BasicTensor<T> fused;         // [N, fused_dim]
  BasicTensor<T> logits;        // pretraining head, [N, K]
};

template <class T>
struct Student {
  ModelConfig cfg;
  Backbone<T> backbone;
  Dma<T> dma;                    // unused when !cfg.use_dma
  LinearLayer<T> pretrain_head;  // fused -> K
  GruCell<T> gru;                // fused -> H
  LinearLayer<T> proj1, proj2;   // H -> H -> proj_dim
  LinearLayer<T> classifier;     // H -> K + 1

  static Student init(const ModelConfig& cfg, Rng& rng);
  /// Parameter names are prefixed backbone., dma., pretrain_head., gru.,
  /// proj., classifier.
  void collect(NamedParams<T>& out) const;
  /// Parameters whose name starts with one of `prefixes`.
  std::vector<BasicTensor<T>> params(const std::vector<std::string>& prefixes) const;
};

/// Features of a backbone map [N, D, T, h, w]: pooled static vector, DMA
/// output and their concatenation.
template <class T>
StudentOutput<T> clip_features(const Student<T>& s, const BasicTensor<T>& z_static_map);

/// rgb: [N, 3, t_clip, H, W]. Throws ContractError when T != t_clip.
template <class T>
StudentOutput<T> student_forward(const Student<T>& s, const BasicTensor<T>& rgb);

/// L2-normalised projection of GRU states [N, H] -> [N, proj_dim].
template <class T>
BasicTensor<T> project(const LinearLayer<T>& p1, const LinearLayer<T>& p2, const BasicTensor<T>& h);

/// Enables or disables gradients on every tensor.
template <class T>
void set_trainable(const std::vector<BasicTensor<T>>& params, bool on);

}  // namespace cake
