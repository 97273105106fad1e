// SPDX-License-Identifier: Apache-2.0
//
// Shared generators and reference implementations for the unit tests. The
// references are deliberately naive scalar loops, written independently of
// the library kernels.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "cake/odconv.hpp"
#include "cake/ops.hpp"
#include "cake/tensor.hpp"

namespace cake::testing {

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

  template <class T = float>
  BasicTensor<T> tensor(Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = T(uniform(lo, hi));
    return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
  }

  template <class T = float>
  BasicTensor<T> unit_rows(std::size_t rows, std::size_t dim) {
    std::vector<T> v(rows * dim);
    std::normal_distribution<double> nd;
    for (std::size_t r = 0; r < rows; ++r) {
      double n2 = 0;
      for (std::size_t j = 0; j < dim; ++j) {
        double x = nd(rng);
        v[r * dim + j] = T(x);
        n2 += x * x;
      }
      for (std::size_t j = 0; j < dim; ++j) v[r * dim + j] = T(v[r * dim + j] / std::sqrt(n2));
    }
    return BasicTensor<T>({rows, dim}, std::move(v));
  }
};

template <class A, class B>
double max_abs_diff(const A& a, const B& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <class T>
std::vector<double> as_double(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

// Plain six-deep loop over (n, oc, t, h, w) and the reduction taps; zero padding.
inline std::vector<double> conv3d_reference(const std::vector<double>& x, const Shape& xs,
                                            const std::vector<double>& w, const Shape& ws,
                                            std::array<std::size_t, 3> stride, std::array<std::size_t, 3> pad,
                                            std::size_t groups, Shape& out_shape) {
  const long N = long(xs[0]), C = long(xs[1]), T = long(xs[2]), H = long(xs[3]), W = long(xs[4]);
  const long OC = long(ws[0]), ICg = long(ws[1]), KT = long(ws[2]), KH = long(ws[3]), KW = long(ws[4]);
  const long OT = (T + 2 * long(pad[0]) - KT) / long(stride[0]) + 1;
  const long OH = (H + 2 * long(pad[1]) - KH) / long(stride[1]) + 1;
  const long OW = (W + 2 * long(pad[2]) - KW) / long(stride[2]) + 1;
  const long OCg = OC / long(groups);
  out_shape = {std::size_t(N), std::size_t(OC), std::size_t(OT), std::size_t(OH), std::size_t(OW)};
  std::vector<double> y(std::size_t(N * OC * OT * OH * OW), 0.0);
  for (long n = 0; n < N; ++n)
    for (long oc = 0; oc < OC; ++oc)
      for (long ot = 0; ot < OT; ++ot)
        for (long oh = 0; oh < OH; ++oh)
          for (long ow = 0; ow < OW; ++ow) {
            double acc = 0;
            for (long j = 0; j < ICg; ++j) {
              const long ic = (oc / OCg) * ICg + j;
              for (long kt = 0; kt < KT; ++kt)
                for (long kh = 0; kh < KH; ++kh)
                  for (long kw = 0; kw < KW; ++kw) {
                    const long it = ot * long(stride[0]) - long(pad[0]) + kt;
                    const long ih = oh * long(stride[1]) - long(pad[1]) + kh;
                    const long iw = ow * long(stride[2]) - long(pad[2]) + kw;
                    if (it < 0 || it >= T || ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                    acc += x[std::size_t((((n * C + ic) * T + it) * H + ih) * W + iw)] *
                           w[std::size_t((((oc * ICg + j) * KT + kt) * KH + kh) * KW + kw)];
                  }
            }
            y[std::size_t((((n * OC + oc) * OT + ot) * OH + oh) * OW + ow)] = acc;
          }
  return y;
}

template <class T>
OmniAttention<T> random_attention(Gen& g, std::size_t batch, std::size_t n, const Conv3dSpec& s) {
  OmniAttention<T> a;
  a.kernel = softmax(g.tensor<T>({batch, n}, -2, 2), 1);
  a.in_channel = g.tensor<T>({batch, s.in_channels}, 0.05, 0.95);
  a.out_channel = g.tensor<T>({batch, s.out_channels}, 0.05, 0.95);
  a.spatial = g.tensor<T>({batch, s.kernel[1] * s.kernel[2]}, 0.05, 0.95);
  a.temporal = g.tensor<T>({batch, s.kernel[0]}, 0.05, 0.95);
  return a;
}

// Sum over i of a_w * a_c * a_f * a_t * a_s * W_i, one scalar at a time.
inline std::vector<double> assemble_reference(const TensorD& base, const OmniAttention<double>& a, std::size_t s,
                                       const Conv3dSpec& spec) {
  const std::size_t n = base.dim(0), O = spec.out_channels, J = spec.in_channels / spec.groups;
  const std::size_t KT = spec.kernel[0], KH = spec.kernel[1], KW = spec.kernel[2];
  const std::size_t Og = O / spec.groups;
  std::vector<double> out(O * J * KT * KH * KW, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t kt = 0; kt < KT; ++kt)
          for (std::size_t kh = 0; kh < KH; ++kh)
            for (std::size_t kw = 0; kw < KW; ++kw) {
              const std::size_t ic = (o / Og) * J + j;
              const std::size_t e = (((o * J + j) * KT + kt) * KH + kh) * KW + kw;
              out[e] += a.kernel[s * n + i] * a.out_channel[s * O + o] * a.in_channel[s * spec.in_channels + ic] *
                        a.temporal[s * KT + kt] * a.spatial[s * KH * KW + kh * KW + kw] *
                        base[i * out.size() + e];
            }
  return out;
}

// Precision at each positive counted over every frame scoring at least as high.
inline double brute_ap(const std::vector<float>& s, const std::vector<bool>& pos, double w) {
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    double tp = 0, fp = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] >= s[i]) (pos[j] ? tp : fp) += 1;
    acc += tp / (tp + (fp == 0 ? 0 : fp / w));
    ++n;
  }
  return n ? acc / double(n) : 0.0;
}

}  // namespace cake::testing
