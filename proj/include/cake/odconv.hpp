// SPDX-License-Identifier: Apache-2.0
//
// Omni-dimensional dynamic 3D convolution (ODConv3D) and the Dynamic Motion
// Adapter built from it.
//
// An ODConv3D layer owns n base kernels W_i. For every sample, an attention
// stem looks at the pooled input and emits five factors: a softmax over the n
// kernels (a_w) and sigmoid gates over input channels (a_f), output channels
// (a_c), the kh*kw spatial taps (a_s) and the kt temporal taps (a_t). The
// sample's kernel is
//
//   W = sum_i a_w[i] * (a_c (x) a_f (x) a_t (x) a_s) * W_i
//
// with each factor broadcast along its own kernel axis. With n = 1 and every
// factor forced to 1 the layer is an ordinary conv3d.

#pragma once

#include <cstddef>
#include <string>

#include "cake/nn.hpp"
#include "cake/tensor.hpp"

namespace cake {

struct DmaConfig {
  double reduction = 1.0 / 16.0;
  std::size_t d_feat = 192;
  std::size_t kernels = 4;
  /// false selects the static-Conv3D variant: one base kernel per layer and
  /// identity attention, i.e. plain conv3d.
  bool dynamic = true;
  /// Whether the temporal/spatial hallucination convolutions are dynamic.
  bool dynamic_hallucination = true;

  /// floor(c_in * reduction); throws ContractError when that is zero.
  std::size_t attention_hidden(std::size_t c_in) const;
};

template <class T>
struct KernelBank {
  BasicTensor<T> base;  // [n, C_out, C_in/groups, kt, kh, kw]
  std::size_t count() const { return base.dim(0); }
};

template <class T>
struct OmniAttention {
  BasicTensor<T> kernel;       // a_w [N, n], rows sum to 1
  BasicTensor<T> in_channel;   // a_f [N, C_in]
  BasicTensor<T> out_channel;  // a_c [N, C_out]
  BasicTensor<T> spatial;      // a_s [N, kh*kw]
  BasicTensor<T> temporal;     // a_t [N, kt]

  /// Every factor 1 (including a_w), no gradient.
  static OmniAttention identity(std::size_t batch, std::size_t kernels, const Conv3dSpec& spec);
};

template <class T>
struct AttentionParams {
  LinearLayer<T> stem;  // C_in -> floor(C_in * r), followed by ReLU
  LinearLayer<T> kernel_head, in_channel_head, out_channel_head, spatial_head, temporal_head;

  static AttentionParams init(const Conv3dSpec& spec, std::size_t kernels, std::size_t hidden, Rng& rng);
  void collect(NamedParams<T>& out, const std::string& prefix) const;
};

/// pool -> stem -> ReLU -> five heads; softmax on a_w, sigmoid elsewhere.
template <class T>
OmniAttention<T> attention_forward(const BasicTensor<T>& x, const AttentionParams<T>& params);

/// Dynamic kernel for one sample, [C_out, C_in/groups, kt, kh, kw]. For grouped
/// kernels the input-channel gate of kernel slice [o, j] is a_f[group(o) *
/// C_in/groups + j], the input channel that slice actually reads.
template <class T>
BasicTensor<T> assemble_dynamic_kernel(const KernelBank<T>& bank, const OmniAttention<T>& att, std::size_t sample,
                                       const Conv3dSpec& spec);

template <class T>
struct ODConv3d {
  Conv3dSpec spec;
  KernelBank<T> bank;
  AttentionParams<T> attention;  // unused when identity_attention is set
  bool identity_attention = false;

  /// `dynamic == false` builds one base kernel with identity attention.
  static ODConv3d init(const Conv3dSpec& spec, std::size_t kernels, double reduction, bool dynamic, Rng& rng);
  OmniAttention<T> attend(const BasicTensor<T>& x) const;
  void collect(NamedParams<T>& out, const std::string& prefix) const;
};

/// Per sample: attention, kernel assembly, conv3d; outputs stacked on axis 0.
template <class T>
BasicTensor<T> odconv3d_forward(const BasicTensor<T>& x, const ODConv3d<T>& layer);

/// depthwise 3x3x3 -> pointwise 1x1x1 -> ReLU -> temporal 3x1x1 -> spatial 1x3x3
/// -> ReLU -> global average pool, every convolution an ODConv3D layer.
template <class T>
struct Dma {
  ODConv3d<T> depthwise, pointwise, temporal, spatial;

  static Dma init(std::size_t channels, const DmaConfig& cfg, Rng& rng);
  std::size_t in_channels() const { return depthwise.spec.in_channels; }
  std::size_t out_features() const { return spatial.spec.out_channels; }
  void collect(NamedParams<T>& out, const std::string& prefix) const;
};

/// z_motion = DMA(z_static): [N, C, T, H, W] -> [N, D_feat].
template <class T>
BasicTensor<T> dma_forward(const BasicTensor<T>& z_static, const Dma<T>& dma);

/// Concatenation along the feature axis, static half first.
template <class T>
BasicTensor<T> fuse_features(const BasicTensor<T>& z_static_vec, const BasicTensor<T>& z_motion);

}  // namespace cake
