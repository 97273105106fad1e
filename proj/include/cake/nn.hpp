// SPDX-License-Identifier: Apache-2.0
//
// Standard building blocks: direct 3D convolution, pooling, linear layers and
// the GRU cell.

#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cake/tensor.hpp"

namespace cake {

using Rng = std::mt19937_64;

template <class T>
using NamedParams = std::vector<std::pair<std::string, BasicTensor<T>>>;

/// Uniform values in [-bound, bound], as a gradient-taking leaf.
template <class T>
BasicTensor<T> uniform_param(Shape shape, double bound, Rng& rng);

/// Extents are ordered (t, h, w).
struct Conv3dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
  std::size_t groups = 1;

  void validate() const;
  Shape weight_shape() const;
  /// floor((in + 2p - k) / s) + 1 per axis; throws ShapeError if any is < 1.
  std::array<std::size_t, 3> output_extents(std::size_t t, std::size_t h, std::size_t w) const;
  bool operator==(const Conv3dSpec&) const = default;
};

/// Direct convolution. x: [N, C_in, T, H, W], w: [C_out, C_in/groups, kt, kh, kw].
/// Each output accumulates over (input channel, kt, kh, kw) in row-major
/// order, independent of the thread count.
template <class T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& w, const Conv3dSpec& spec);

/// Mean over T, H, W: [N, C, T, H, W] -> [N, C].
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

/// Non-overlapping average pooling with window == stride; trailing remainders
/// are dropped.
template <class T>
BasicTensor<T> avg_pool3d(const BasicTensor<T>& x, std::array<std::size_t, 3> window);

template <class T>
struct LinearLayer {
  BasicTensor<T> weight;  // [out, in]
  BasicTensor<T> bias;    // [out]

  static LinearLayer init(std::size_t in, std::size_t out, Rng& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
  void collect(NamedParams<T>& out, const std::string& prefix) const;
};

/// Gated recurrent unit with the reset gate applied after the recurrent
/// matrix product:
///   z  = sigmoid(W_z x + U_z h + b_z)
///   r  = sigmoid(W_r x + U_r h + b_r)
///   n  = tanh(W_n x + r * (U_n h + b_hn) + b_n)
///   h' = (1 - z) * n + z * h
template <class T>
struct GruCell {
  BasicTensor<T> w_z, w_r, w_n;  // [H, D_in]
  BasicTensor<T> u_z, u_r, u_n;  // [H, H]
  BasicTensor<T> b_z, b_r, b_n, b_hn;  // [H]

  static GruCell init(std::size_t input_size, std::size_t hidden_size, Rng& rng);
  static GruCell zeros(std::size_t input_size, std::size_t hidden_size);
  std::size_t input_size() const { return w_z.dim(1); }
  std::size_t hidden_size() const { return w_z.dim(0); }
  void collect(NamedParams<T>& out, const std::string& prefix) const;
};

/// One step. Accepts x: [D_in] with h: [H], or batched x: [N, D_in] with h: [N, H].
template <class T>
BasicTensor<T> gru_step(const GruCell<T>& cell, const BasicTensor<T>& x, const BasicTensor<T>& h);

/// Folds gru_step over the rows of xs: [L, D_in] starting from h0: [H].
/// Row t of the result is the hidden state after step t.
template <class T>
BasicTensor<T> gru_sequence(const GruCell<T>& cell, const BasicTensor<T>& xs, const BasicTensor<T>& h0);

}  // namespace cake
