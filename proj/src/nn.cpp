// SPDX-License-Identifier: Apache-2.0

#include "cake/nn.hpp"

#include <algorithm>
#include <cmath>

#include "cake/ops.hpp"
#include "cake/parallel.hpp"
#include "record.hpp"

namespace cake {

using detail::finish;
using detail::grad_target;

template <class T>
BasicTensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return BasicTensor<T>(std::move(shape), std::move(data), true);
}

void Conv3dSpec::validate() const {
  if (groups == 0 || in_channels == 0 || out_channels == 0)
    throw ShapeError("conv3d: channels and groups must be positive");
  if (in_channels % groups != 0 || out_channels % groups != 0)
    throw ShapeError("conv3d: channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                     " not divisible by groups " + std::to_string(groups));
  for (std::size_t a = 0; a < 3; ++a)
    if (kernel[a] == 0 || stride[a] == 0) throw ShapeError("conv3d: kernel and stride must be positive");
}

Shape Conv3dSpec::weight_shape() const {
  return {out_channels, in_channels / groups, kernel[0], kernel[1], kernel[2]};
}

std::array<std::size_t, 3> Conv3dSpec::output_extents(std::size_t t, std::size_t h, std::size_t w) const {
  const std::array<std::size_t, 3> in{t, h, w};
  std::array<std::size_t, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t padded = in[a] + 2 * padding[a];
    if (padded < kernel[a])
      throw ShapeError("conv3d: kernel extent " + std::to_string(kernel[a]) + " exceeds padded input " +
                       std::to_string(padded));
    out[a] = (padded - kernel[a]) / stride[a] + 1;
  }
  return out;
}

namespace {

// Geometry shared by the forward and both backward passes.
struct ConvGeom {
  std::size_t N, Cin, Cout, G, cin_g, cout_g;
  std::size_t IT, IH, IW, OT, OH, OW;
  std::size_t KT, KH, KW, ST, SH, SW, PT, PH, PW;

  std::size_t in_plane() const { return IT * IH * IW; }
  std::size_t out_plane() const { return OT * OH * OW; }
  std::size_t taps() const { return KT * KH * KW; }

  // Output index range along one axis whose input coordinate
  // o * s + k - p falls inside [0, in).
  static std::pair<std::size_t, std::size_t> valid(std::size_t k, std::size_t s, std::size_t p, std::size_t in,
                                                   std::size_t out) {
    // lo = ceil((p - k) / s) clamped at 0; hi = floor((in - 1 + p - k) / s) + 1 clamped at out.
    std::size_t lo = 0;
    if (p > k) lo = (p - k + s - 1) / s;
    if (in + p < k + 1) return {0, 0};
    std::size_t hi = (in - 1 + p - k) / s + 1;
    hi = std::min(hi, out);
    if (lo >= hi) return {0, 0};
    return {lo, hi};
  }
};

ConvGeom make_geom(const Shape& x, const Shape& w, const Conv3dSpec& spec) {
  spec.validate();
  if (x.size() != 5) throw ShapeError("conv3d: input must be [N,C,T,H,W], got " + shape_str(x));
  if (x[1] != spec.in_channels)
    throw ShapeError("conv3d: input has " + std::to_string(x[1]) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  if (w != spec.weight_shape())
    throw ShapeError("conv3d: weight " + shape_str(w) + " does not match spec " + shape_str(spec.weight_shape()));
  ConvGeom g{};
  g.N = x[0];
  g.Cin = spec.in_channels;
  g.Cout = spec.out_channels;
  g.G = spec.groups;
  g.cin_g = g.Cin / g.G;
  g.cout_g = g.Cout / g.G;
  g.IT = x[2];
  g.IH = x[3];
  g.IW = x[4];
  auto o = spec.output_extents(g.IT, g.IH, g.IW);
  g.OT = o[0];
  g.OH = o[1];
  g.OW = o[2];
  g.KT = spec.kernel[0];
  g.KH = spec.kernel[1];
  g.KW = spec.kernel[2];
  g.ST = spec.stride[0];
  g.SH = spec.stride[1];
  g.SW = spec.stride[2];
  g.PT = spec.padding[0];
  g.PH = spec.padding[1];
  g.PW = spec.padding[2];
  return g;
}

// Calls fn(out_offset, in_offset, count, in_stride_w) for every contiguous run
// of output positions touched by kernel tap (kt, kh, kw).
template <class Fn>
inline void for_each_tap_run(const ConvGeom& g, std::size_t kt, std::size_t kh, std::size_t kw, Fn&& fn) {
  auto [t0, t1] = ConvGeom::valid(kt, g.ST, g.PT, g.IT, g.OT);
  auto [h0, h1] = ConvGeom::valid(kh, g.SH, g.PH, g.IH, g.OH);
  auto [w0, w1] = ConvGeom::valid(kw, g.SW, g.PW, g.IW, g.OW);
  if (t0 >= t1 || h0 >= h1 || w0 >= w1) return;
  for (std::size_t ot = t0; ot < t1; ++ot) {
    const std::size_t it = ot * g.ST + kt - g.PT;
    for (std::size_t oh = h0; oh < h1; ++oh) {
      const std::size_t ih = oh * g.SH + kh - g.PH;
      const std::size_t iw = w0 * g.SW + kw - g.PW;
      fn((ot * g.OH + oh) * g.OW + w0, (it * g.IH + ih) * g.IW + iw, w1 - w0);
    }
  }
}

}  // namespace

template <class T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& w, const Conv3dSpec& spec) {
  const ConvGeom g = make_geom(x.shape(), w.shape(), spec);
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  std::vector<T> out(g.N * g.Cout * g.out_plane(), T(0));
  const std::size_t work = g.N * g.cin_g * g.taps() * g.out_plane();

  parallel_for(g.Cout, work, [&](std::size_t oc_begin, std::size_t oc_end) {
    for (std::size_t n = 0; n < g.N; ++n)
      for (std::size_t oc = oc_begin; oc < oc_end; ++oc) {
        const std::size_t grp = oc / g.cout_g;
        T* o = &out[(n * g.Cout + oc) * g.out_plane()];
        for (std::size_t icl = 0; icl < g.cin_g; ++icl) {
          const std::size_t ic = grp * g.cin_g + icl;
          const T* xc = xv + (n * g.Cin + ic) * g.in_plane();
          const T* wk = wv + (oc * g.cin_g + icl) * g.taps();
          for (std::size_t kt = 0; kt < g.KT; ++kt)
            for (std::size_t kh = 0; kh < g.KH; ++kh)
              for (std::size_t kw = 0; kw < g.KW; ++kw) {
                const T wval = wk[(kt * g.KH + kh) * g.KW + kw];
                for_each_tap_run(g, kt, kh, kw, [&](std::size_t oo, std::size_t io, std::size_t len) {
                  T* op = o + oo;
                  const T* ip = xc + io;
                  if (g.SW == 1)
                    for (std::size_t i = 0; i < len; ++i) op[i] += wval * ip[i];
                  else
                    for (std::size_t i = 0; i < len; ++i) op[i] += wval * ip[i * g.SW];
                });
              }
        }
      }
  });

  return finish<T>(Shape{g.N, g.Cout, g.OT, g.OH, g.OW}, std::move(out), {x, w},
                   [x, w, g, work](const std::vector<T>& gout, const std::vector<T>&) mutable {
                     T* gx = grad_target(x);
                     T* gw = grad_target(w);
                     const T* xv = x.data().data();
                     const T* wv = w.data().data();
                     if (gx)
                       parallel_for(g.Cin, work, [&](std::size_t ic_begin, std::size_t ic_end) {
                         for (std::size_t n = 0; n < g.N; ++n)
                           for (std::size_t ic = ic_begin; ic < ic_end; ++ic) {
                             const std::size_t grp = ic / g.cin_g, icl = ic % g.cin_g;
                             T* gxc = gx + (n * g.Cin + ic) * g.in_plane();
                             for (std::size_t ocl = 0; ocl < g.cout_g; ++ocl) {
                               const std::size_t oc = grp * g.cout_g + ocl;
                               const T* go = &gout[(n * g.Cout + oc) * g.out_plane()];
                               const T* wk = wv + (oc * g.cin_g + icl) * g.taps();
                               for (std::size_t kt = 0; kt < g.KT; ++kt)
                                 for (std::size_t kh = 0; kh < g.KH; ++kh)
                                   for (std::size_t kw = 0; kw < g.KW; ++kw) {
                                     const T wval = wk[(kt * g.KH + kh) * g.KW + kw];
                                     for_each_tap_run(g, kt, kh, kw,
                                                      [&](std::size_t oo, std::size_t io, std::size_t len) {
                                                        const T* gp = go + oo;
                                                        T* xp = gxc + io;
                                                        for (std::size_t i = 0; i < len; ++i)
                                                          xp[i * g.SW] += wval * gp[i];
                                                      });
                                   }
                             }
                           }
                       });
                     if (gw)
                       parallel_for(g.Cout, work, [&](std::size_t oc_begin, std::size_t oc_end) {
                         for (std::size_t oc = oc_begin; oc < oc_end; ++oc) {
                           const std::size_t grp = oc / g.cout_g;
                           for (std::size_t icl = 0; icl < g.cin_g; ++icl) {
                             const std::size_t ic = grp * g.cin_g + icl;
                             T* gwk = gw + (oc * g.cin_g + icl) * g.taps();
                             for (std::size_t kt = 0; kt < g.KT; ++kt)
                               for (std::size_t kh = 0; kh < g.KH; ++kh)
                                 for (std::size_t kw = 0; kw < g.KW; ++kw) {
                                   T acc = 0;
                                   for (std::size_t n = 0; n < g.N; ++n) {
                                     const T* go = &gout[(n * g.Cout + oc) * g.out_plane()];
                                     const T* xc = xv + (n * g.Cin + ic) * g.in_plane();
                                     for_each_tap_run(g, kt, kh, kw,
                                                      [&](std::size_t oo, std::size_t io, std::size_t len) {
                                                        for (std::size_t i = 0; i < len; ++i)
                                                          acc += go[oo + i] * xc[io + i * g.SW];
                                                      });
                                   }
                                   gwk[(kt * g.KH + kh) * g.KW + kw] += acc;
                                 }
                           }
                         }
                       });
                   });
}

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("global_avg_pool expects [N,C,T,H,W], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3) * x.dim(4);
  const auto& xv = x.data();
  std::vector<T> out(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += xv[nc * plane + i];
    out[nc] = acc / static_cast<T>(plane);
  }
  return finish<T>(Shape{N, C}, std::move(out), {x},
                   [x, N, C, plane](const std::vector<T>& g, const std::vector<T>&) mutable {
                     T* gx = grad_target(x);
                     const T inv = T(1) / static_cast<T>(plane);
                     for (std::size_t nc = 0; nc < N * C; ++nc)
                       for (std::size_t i = 0; i < plane; ++i) gx[nc * plane + i] += g[nc] * inv;
                   });
}

template <class T>
BasicTensor<T> avg_pool3d(const BasicTensor<T>& x, std::array<std::size_t, 3> window) {
  if (x.rank() != 5) throw ShapeError("avg_pool3d expects [N,C,T,H,W], got " + shape_str(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1);
  const std::size_t IT = x.dim(2), IH = x.dim(3), IW = x.dim(4);
  const std::size_t KT = window[0], KH = window[1], KW = window[2];
  if (KT == 0 || KH == 0 || KW == 0 || IT < KT || IH < KH || IW < KW)
    throw ShapeError("avg_pool3d: window larger than input " + shape_str(x.shape()));
  const std::size_t OT = IT / KT, OH = IH / KH, OW = IW / KW;
  const T inv = T(1) / static_cast<T>(KT * KH * KW);
  const auto& xv = x.data();
  std::vector<T> out(NC * OT * OH * OW);
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t ot = 0; ot < OT; ++ot)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          T acc = 0;
          for (std::size_t kt = 0; kt < KT; ++kt)
            for (std::size_t kh = 0; kh < KH; ++kh)
              for (std::size_t kw = 0; kw < KW; ++kw)
                acc += xv[((c * IT + ot * KT + kt) * IH + oh * KH + kh) * IW + ow * KW + kw];
          out[((c * OT + ot) * OH + oh) * OW + ow] = acc * inv;
        }
  Shape shape{x.dim(0), x.dim(1), OT, OH, OW};
  return finish<T>(std::move(shape), std::move(out), {x},
                   [x, NC, IT, IH, IW, KT, KH, KW, OT, OH, OW, inv](const std::vector<T>& g,
                                                                    const std::vector<T>&) mutable {
                     T* gx = grad_target(x);
                     for (std::size_t c = 0; c < NC; ++c)
                       for (std::size_t ot = 0; ot < OT; ++ot)
                         for (std::size_t oh = 0; oh < OH; ++oh)
                           for (std::size_t ow = 0; ow < OW; ++ow) {
                             const T go = g[((c * OT + ot) * OH + oh) * OW + ow] * inv;
                             for (std::size_t kt = 0; kt < KT; ++kt)
                               for (std::size_t kh = 0; kh < KH; ++kh)
                                 for (std::size_t kw = 0; kw < KW; ++kw)
                                   gx[((c * IT + ot * KT + kt) * IH + oh * KH + kh) * IW + ow * KW + kw] += go;
                           }
                   });
}

template <class T>
LinearLayer<T> LinearLayer<T>::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  LinearLayer layer;
  layer.weight = uniform_param<T>({out, in}, bound, rng);
  layer.bias = uniform_param<T>({out}, bound, rng);
  return layer;
}

template <class T>
BasicTensor<T> LinearLayer<T>::forward(const BasicTensor<T>& x) const {
  return linear(x, weight, bias);
}

template <class T>
void LinearLayer<T>::collect(NamedParams<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template <class T>
GruCell<T> GruCell<T>::init(std::size_t input_size, std::size_t hidden_size, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  GruCell c;
  c.w_z = uniform_param<T>({hidden_size, input_size}, bound, rng);
  c.w_r = uniform_param<T>({hidden_size, input_size}, bound, rng);
  c.w_n = uniform_param<T>({hidden_size, input_size}, bound, rng);
  c.u_z = uniform_param<T>({hidden_size, hidden_size}, bound, rng);
  c.u_r = uniform_param<T>({hidden_size, hidden_size}, bound, rng);
  c.u_n = uniform_param<T>({hidden_size, hidden_size}, bound, rng);
  c.b_z = uniform_param<T>({hidden_size}, bound, rng);
  c.b_r = uniform_param<T>({hidden_size}, bound, rng);
  c.b_n = uniform_param<T>({hidden_size}, bound, rng);
  c.b_hn = uniform_param<T>({hidden_size}, bound, rng);
  return c;
}

template <class T>
GruCell<T> GruCell<T>::zeros(std::size_t input_size, std::size_t hidden_size) {
  GruCell c;
  auto z = [](Shape s) { return BasicTensor<T>::zeros(std::move(s)).set_requires_grad(true); };
  c.w_z = z({hidden_size, input_size});
  c.w_r = z({hidden_size, input_size});
  c.w_n = z({hidden_size, input_size});
  c.u_z = z({hidden_size, hidden_size});
  c.u_r = z({hidden_size, hidden_size});
  c.u_n = z({hidden_size, hidden_size});
  c.b_z = z({hidden_size});
  c.b_r = z({hidden_size});
  c.b_n = z({hidden_size});
  c.b_hn = z({hidden_size});
  return c;
}

template <class T>
void GruCell<T>::collect(NamedParams<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".w_z", w_z);
  out.emplace_back(prefix + ".w_r", w_r);
  out.emplace_back(prefix + ".w_n", w_n);
  out.emplace_back(prefix + ".u_z", u_z);
  out.emplace_back(prefix + ".u_r", u_r);
  out.emplace_back(prefix + ".u_n", u_n);
  out.emplace_back(prefix + ".b_z", b_z);
  out.emplace_back(prefix + ".b_r", b_r);
  out.emplace_back(prefix + ".b_n", b_n);
  out.emplace_back(prefix + ".b_hn", b_hn);
}

template <class T>
BasicTensor<T> gru_step(const GruCell<T>& cell, const BasicTensor<T>& x, const BasicTensor<T>& h) {
  const std::size_t D = cell.input_size(), H = cell.hidden_size();
  const bool vector_form = x.rank() == 1;
  BasicTensor<T> xb = x, hb = h;
  if (vector_form) {
    if (x.dim(0) != D || h.rank() != 1 || h.dim(0) != H)
      throw ShapeError("gru_step: x " + shape_str(x.shape()) + ", h " + shape_str(h.shape()) + " for cell (" +
                       std::to_string(D) + "->" + std::to_string(H) + ")");
    xb = reshape(x, {1, D});
    hb = reshape(h, {1, H});
  } else if (x.rank() != 2 || h.rank() != 2 || x.dim(1) != D || h.dim(1) != H || x.dim(0) != h.dim(0)) {
    throw ShapeError("gru_step: x " + shape_str(x.shape()) + ", h " + shape_str(h.shape()) + " for cell (" +
                     std::to_string(D) + "->" + std::to_string(H) + ")");
  }
  const BasicTensor<T> none;
  auto z = sigmoid(add(linear(xb, cell.w_z, cell.b_z), linear(hb, cell.u_z, none)));
  auto r = sigmoid(add(linear(xb, cell.w_r, cell.b_r), linear(hb, cell.u_r, none)));
  auto n = tanh(add(linear(xb, cell.w_n, cell.b_n), mul(r, linear(hb, cell.u_n, cell.b_hn))));
  auto next = add(mul(add_scalar(scale(z, T(-1)), T(1)), n), mul(z, hb));
  return vector_form ? reshape(next, {H}) : next;
}

template <class T>
BasicTensor<T> gru_sequence(const GruCell<T>& cell, const BasicTensor<T>& xs, const BasicTensor<T>& h0) {
  if (!xs.defined()) throw ContractError("gru_sequence: empty sequence");
  if (xs.rank() != 2) throw ShapeError("gru_sequence expects xs [L,D], got " + shape_str(xs.shape()));
  const std::size_t L = xs.dim(0);
  std::vector<BasicTensor<T>> states;
  states.reserve(L);
  BasicTensor<T> h = h0;
  for (std::size_t t = 0; t < L; ++t) {
    h = gru_step(cell, select(xs, t), h);
    states.push_back(h);
  }
  return stack(states);
}

#define CAKE_INSTANTIATE_NN(T)                                                                     \
  template BasicTensor<T> uniform_param<T>(Shape, double, Rng&);                                   \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&, const Conv3dSpec&); \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                  \
  template BasicTensor<T> avg_pool3d(const BasicTensor<T>&, std::array<std::size_t, 3>);            \
  template struct LinearLayer<T>;                                                                  \
  template struct GruCell<T>;                                                                      \
  template BasicTensor<T> gru_step(const GruCell<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> gru_sequence(const GruCell<T>&, const BasicTensor<T>&, const BasicTensor<T>&);

CAKE_INSTANTIATE_NN(float)
CAKE_INSTANTIATE_NN(double)

}  // namespace cake
