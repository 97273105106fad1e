// SPDX-License-Identifier: Apache-2.0

#include "cake/odconv.hpp"

#include <cmath>

#include "cake/ops.hpp"
#include "record.hpp"

namespace cake {

using detail::finish;
using detail::grad_target;

namespace {
constexpr double kGateBiasInit = 2.0;
}  // namespace

std::size_t DmaConfig::attention_hidden(std::size_t c_in) const {
  const auto hidden = static_cast<std::size_t>(std::floor(static_cast<double>(c_in) * reduction + 1e-9));
  if (hidden == 0)
    throw ContractError("attention stem width floor(" + std::to_string(c_in) + " * " + std::to_string(reduction) +
                        ") is zero");
  return hidden;
}

template <class T>
OmniAttention<T> OmniAttention<T>::identity(std::size_t batch, std::size_t kernels, const Conv3dSpec& spec) {
  using Tn = BasicTensor<T>;
  return {Tn::ones({batch, kernels}), Tn::ones({batch, spec.in_channels}), Tn::ones({batch, spec.out_channels}),
          Tn::ones({batch, spec.kernel[1] * spec.kernel[2]}), Tn::ones({batch, spec.kernel[0]})};
}

template <class T>
AttentionParams<T> AttentionParams<T>::init(const Conv3dSpec& spec, std::size_t kernels, std::size_t hidden,
                                            Rng& rng) {
  AttentionParams p;
  p.stem = LinearLayer<T>::init(spec.in_channels, hidden, rng);
  p.kernel_head = LinearLayer<T>::init(hidden, kernels, rng);
  p.in_channel_head = LinearLayer<T>::init(hidden, spec.in_channels, rng);
  p.out_channel_head = LinearLayer<T>::init(hidden, spec.out_channels, rng);
  p.spatial_head = LinearLayer<T>::init(hidden, spec.kernel[1] * spec.kernel[2], rng);
  p.temporal_head = LinearLayer<T>::init(hidden, spec.kernel[0], rng);
  // Gates start mostly open so the assembled kernel keeps the scale of the
  // base kernels.
  for (auto* head : {&p.in_channel_head, &p.out_channel_head, &p.spatial_head, &p.temporal_head})
    for (auto& b : head->bias.mutable_data()) b = T(kGateBiasInit);
  return p;
}

template <class T>
void AttentionParams<T>::collect(NamedParams<T>& out, const std::string& prefix) const {
  stem.collect(out, prefix + ".stem");
  kernel_head.collect(out, prefix + ".kernel");
  in_channel_head.collect(out, prefix + ".in_channel");
  out_channel_head.collect(out, prefix + ".out_channel");
  spatial_head.collect(out, prefix + ".spatial");
  temporal_head.collect(out, prefix + ".temporal");
}

template <class T>
OmniAttention<T> attention_forward(const BasicTensor<T>& x, const AttentionParams<T>& params) {
  if (x.rank() != 5 || x.dim(1) != params.stem.in_features())
    throw ShapeError("attention_forward: input " + shape_str(x.shape()) + " for stem over " +
                     std::to_string(params.stem.in_features()) + " channels");
  auto hidden = relu(params.stem.forward(global_avg_pool(x)));
  OmniAttention<T> att;
  att.kernel = softmax(params.kernel_head.forward(hidden), 1);
  att.in_channel = sigmoid(params.in_channel_head.forward(hidden));
  att.out_channel = sigmoid(params.out_channel_head.forward(hidden));
  att.spatial = sigmoid(params.spatial_head.forward(hidden));
  att.temporal = sigmoid(params.temporal_head.forward(hidden));
  return att;
}

template <class T>
BasicTensor<T> assemble_dynamic_kernel(const KernelBank<T>& bank, const OmniAttention<T>& att, std::size_t sample,
                                       const Conv3dSpec& spec) {
  const Shape wshape = spec.weight_shape();
  const std::size_t n = bank.count();
  Shape expect = wshape;
  expect.insert(expect.begin(), n);
  if (bank.base.shape() != expect)
    throw ShapeError("kernel bank " + shape_str(bank.base.shape()) + " does not match " + shape_str(expect));
  const std::size_t Cout = wshape[0], Cin_g = wshape[1], KT = wshape[2], KH = wshape[3], KW = wshape[4];
  const std::size_t Cin = spec.in_channels, cout_g = Cout / spec.groups;
  auto check = [&](const BasicTensor<T>& a, std::size_t width, const char* name) {
    if (a.rank() != 2 || a.dim(1) != width || sample >= a.dim(0))
      throw ShapeError(std::string("attention factor ") + name + " " + shape_str(a.shape()) + " for sample " +
                       std::to_string(sample));
  };
  check(att.kernel, n, "a_w");
  check(att.in_channel, Cin, "a_f");
  check(att.out_channel, Cout, "a_c");
  check(att.spatial, KH * KW, "a_s");
  check(att.temporal, KT, "a_t");

  const std::size_t E = shape_numel(wshape);
  const T* aw = att.kernel.data().data() + sample * n;
  const T* af = att.in_channel.data().data() + sample * Cin;
  const T* ac = att.out_channel.data().data() + sample * Cout;
  const T* as = att.spatial.data().data() + sample * KH * KW;
  const T* at = att.temporal.data().data() + sample * KT;
  const T* base = bank.base.data().data();

  // factor[e] = a_c * a_f * a_t * a_s; mixed[e] = sum_i a_w[i] * base[i, e].
  std::vector<T> factor(E), mixed(E, T(0));
  for (std::size_t o = 0; o < Cout; ++o)
    for (std::size_t j = 0; j < Cin_g; ++j) {
      const T cf = ac[o] * af[(o / cout_g) * Cin_g + j];
      for (std::size_t t = 0; t < KT; ++t)
        for (std::size_t s = 0; s < KH * KW; ++s) factor[((o * Cin_g + j) * KT + t) * KH * KW + s] = cf * at[t] * as[s];
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < E; ++e) mixed[e] += aw[i] * base[i * E + e];
  std::vector<T> out(E);
  for (std::size_t e = 0; e < E; ++e) out[e] = factor[e] * mixed[e];

  BasicTensor<T> b = bank.base, kw = att.kernel, kf = att.in_channel, kc = att.out_channel, ks = att.spatial,
                 kt = att.temporal;
  return finish<T>(wshape, std::move(out), {b, kw, kf, kc, ks, kt},
                   [=, factor = std::move(factor), mixed = std::move(mixed)](const std::vector<T>& g,
                                                                             const std::vector<T>&) mutable {
                     const T* aw = kw.data().data() + sample * n;
                     const T* af = kf.data().data() + sample * Cin;
                     const T* ac = kc.data().data() + sample * Cout;
                     const T* as = ks.data().data() + sample * KH * KW;
                     const T* at = kt.data().data() + sample * KT;
                     const T* base = b.data().data();
                     if (T* gb = grad_target(b))
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t e = 0; e < E; ++e) gb[i * E + e] += g[e] * aw[i] * factor[e];
                     if (T* gw = grad_target(kw))
                       for (std::size_t i = 0; i < n; ++i) {
                         T acc = 0;
                         for (std::size_t e = 0; e < E; ++e) acc += g[e] * factor[e] * base[i * E + e];
                         gw[sample * n + i] += acc;
                       }
                     T* gf = grad_target(kf);
                     T* gc = grad_target(kc);
                     T* gs = grad_target(ks);
                     T* gt = grad_target(kt);
                     if (!gf && !gc && !gs && !gt) return;
                     for (std::size_t o = 0; o < Cout; ++o)
                       for (std::size_t j = 0; j < Cin_g; ++j) {
                         const std::size_t f_idx = (o / cout_g) * Cin_g + j;
                         for (std::size_t t = 0; t < KT; ++t)
                           for (std::size_t s = 0; s < KH * KW; ++s) {
                             const std::size_t e = ((o * Cin_g + j) * KT + t) * KH * KW + s;
                             const T d = g[e] * mixed[e];
                             if (gc) gc[sample * Cout + o] += d * af[f_idx] * at[t] * as[s];
                             if (gf) gf[sample * Cin + f_idx] += d * ac[o] * at[t] * as[s];
                             if (gt) gt[sample * KT + t] += d * ac[o] * af[f_idx] * as[s];
                             if (gs) gs[sample * KH * KW + s] += d * ac[o] * af[f_idx] * at[t];
                           }
                       }
                   });
}

template <class T>
ODConv3d<T> ODConv3d<T>::init(const Conv3dSpec& spec, std::size_t kernels, double reduction, bool dynamic,
                              Rng& rng) {
  spec.validate();
  ODConv3d layer;
  layer.spec = spec;
  layer.identity_attention = !dynamic;
  const std::size_t n = dynamic ? kernels : 1;
  if (n == 0) throw ContractError("ODConv3D needs at least one base kernel");
  const Shape ws = spec.weight_shape();
  const double fan_in = static_cast<double>(ws[1] * ws[2] * ws[3] * ws[4]);
  // The softmax averages n independent kernels and the four gates start near
  // sigmoid(kGateBiasInit); scale the bank so the assembled kernel starts at
  // the variance of a plain kaiming-uniform kernel.
  const double gate = 1.0 / (1.0 + std::exp(-kGateBiasInit));
  const double gain = dynamic ? std::sqrt(static_cast<double>(n)) / std::pow(gate, 4) : 1.0;
  Shape bank_shape = ws;
  bank_shape.insert(bank_shape.begin(), n);
  layer.bank.base = uniform_param<T>(bank_shape, gain * std::sqrt(6.0 / fan_in), rng);
  if (dynamic) {
    DmaConfig probe;
    probe.reduction = reduction;
    layer.attention = AttentionParams<T>::init(spec, n, probe.attention_hidden(spec.in_channels), rng);
  }
  return layer;
}

template <class T>
OmniAttention<T> ODConv3d<T>::attend(const BasicTensor<T>& x) const {
  if (identity_attention) return OmniAttention<T>::identity(x.dim(0), bank.count(), spec);
  return attention_forward(x, attention);
}

template <class T>
void ODConv3d<T>::collect(NamedParams<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".bank", bank.base);
  if (!identity_attention) attention.collect(out, prefix + ".attention");
}

template <class T>
BasicTensor<T> odconv3d_forward(const BasicTensor<T>& x, const ODConv3d<T>& layer) {
  if (x.rank() != 5 || x.dim(1) != layer.spec.in_channels)
    throw ShapeError("odconv3d: input " + shape_str(x.shape()) + " for " + std::to_string(layer.spec.in_channels) +
                     " channels");
  const std::size_t N = x.dim(0);
  auto att = layer.attend(x);
  if (layer.identity_attention) {
    // Identity attention gives every sample the same kernel.
    return conv3d(x, assemble_dynamic_kernel(layer.bank, att, 0, layer.spec), layer.spec);
  }
  std::vector<BasicTensor<T>> outs;
  outs.reserve(N);
  for (std::size_t s = 0; s < N; ++s) {
    auto kernel = assemble_dynamic_kernel(layer.bank, att, s, layer.spec);
    outs.push_back(conv3d(N == 1 ? x : slice_rows(x, s, s + 1), kernel, layer.spec));
  }
  return N == 1 ? outs.front() : concat(outs, 0);
}

template <class T>
Dma<T> Dma<T>::init(std::size_t channels, const DmaConfig& cfg, Rng& rng) {
  const std::size_t D = cfg.d_feat;
  Conv3dSpec dw{channels, channels, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, channels};
  Conv3dSpec pw{channels, D, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1};
  Conv3dSpec tc{D, D, {3, 1, 1}, {1, 1, 1}, {1, 0, 0}, 1};
  Conv3dSpec sc{D, D, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}, 1};
  const bool hall = cfg.dynamic && cfg.dynamic_hallucination;
  Dma dma;
  dma.depthwise = ODConv3d<T>::init(dw, cfg.kernels, cfg.reduction, cfg.dynamic, rng);
  dma.pointwise = ODConv3d<T>::init(pw, cfg.kernels, cfg.reduction, cfg.dynamic, rng);
  dma.temporal = ODConv3d<T>::init(tc, cfg.kernels, cfg.reduction, hall, rng);
  dma.spatial = ODConv3d<T>::init(sc, cfg.kernels, cfg.reduction, hall, rng);
  return dma;
}

template <class T>
void Dma<T>::collect(NamedParams<T>& out, const std::string& prefix) const {
  depthwise.collect(out, prefix + ".depthwise");
  pointwise.collect(out, prefix + ".pointwise");
  temporal.collect(out, prefix + ".temporal");
  spatial.collect(out, prefix + ".spatial");
}

template <class T>
BasicTensor<T> dma_forward(const BasicTensor<T>& z_static, const Dma<T>& dma) {
  if (z_static.rank() != 5 || z_static.dim(1) != dma.in_channels())
    throw ShapeError("dma_forward: input " + shape_str(z_static.shape()) + " for " +
                     std::to_string(dma.in_channels()) + " channels");
  auto h = odconv3d_forward(z_static, dma.depthwise);
  h = relu(odconv3d_forward(h, dma.pointwise));
  h = odconv3d_forward(h, dma.temporal);
  h = relu(odconv3d_forward(h, dma.spatial));
  return global_avg_pool(h);
}

template <class T>
BasicTensor<T> fuse_features(const BasicTensor<T>& z_static_vec, const BasicTensor<T>& z_motion) {
  if (z_static_vec.rank() != 2 || z_static_vec.shape() != z_motion.shape())
    throw ShapeError("fuse_features: " + shape_str(z_static_vec.shape()) + " vs " + shape_str(z_motion.shape()));
  return concat(std::vector<BasicTensor<T>>{z_static_vec, z_motion}, 1);
}

#define CAKE_INSTANTIATE_ODCONV(T)                                                                          \
  template struct OmniAttention<T>;                                                                         \
  template struct AttentionParams<T>;                                                                       \
  template struct ODConv3d<T>;                                                                              \
  template struct Dma<T>;                                                                                   \
  template OmniAttention<T> attention_forward(const BasicTensor<T>&, const AttentionParams<T>&);            \
  template BasicTensor<T> assemble_dynamic_kernel(const KernelBank<T>&, const OmniAttention<T>&, std::size_t, \
                                                  const Conv3dSpec&);                                       \
  template BasicTensor<T> odconv3d_forward(const BasicTensor<T>&, const ODConv3d<T>&);                      \
  template BasicTensor<T> dma_forward(const BasicTensor<T>&, const Dma<T>&);                                \
  template BasicTensor<T> fuse_features(const BasicTensor<T>&, const BasicTensor<T>&);

CAKE_INSTANTIATE_ODCONV(float)
CAKE_INSTANTIATE_ODCONV(double)

}  // namespace cake
