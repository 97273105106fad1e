// SPDX-License-Identifier: Apache-2.0

#include "cake/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "record.hpp"

namespace cake {

using detail::finish;
using detail::finish_n;
using detail::grad_target;

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

namespace {

// Flat source index of every output element for an input broadcast to `out`.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (in[i] != 1) stride[i + offset] = s;
    s *= in[i];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t cur = 0;
  for (std::size_t f = 0; f < n; ++f) {
    idx[f] = cur;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      cur += stride[d];
      if (counter[d] < out[d]) break;
      cur -= stride[d] * out[d];
      counter[d] = 0;
    }
  }
  return idx;
}

enum class Binary { add, sub, mul };

template <class T>
BasicTensor<T> binary(Binary kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& av = a.data();
  const auto& bv = b.data();
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      switch (kind) {
        case Binary::add: out[i] = av[i] + bv[i]; break;
        case Binary::sub: out[i] = av[i] - bv[i]; break;
        case Binary::mul: out[i] = av[i] * bv[i]; break;
      }
    }
    return finish<T>(a.shape(), std::move(out), {a, b},
                     [a, b, kind](const std::vector<T>& g, const std::vector<T>&) mutable {
                       T* ga = grad_target(a);
                       T* gb = grad_target(b);
                       const auto& av = a.data();
                       const auto& bv = b.data();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         switch (kind) {
                           case Binary::add:
                             if (ga) ga[i] += g[i];
                             if (gb) gb[i] += g[i];
                             break;
                           case Binary::sub:
                             if (ga) ga[i] += g[i];
                             if (gb) gb[i] -= g[i];
                             break;
                           case Binary::mul:
                             if (ga) ga[i] += g[i] * bv[i];
                             if (gb) gb[i] += g[i] * av[i];
                             break;
                         }
                       }
                     });
  }

  Shape shape = broadcast_shape(a.shape(), b.shape());
  auto ia = broadcast_index(a.shape(), shape);
  auto ib = broadcast_index(b.shape(), shape);
  const std::size_t n = ia.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[ia[i]], y = bv[ib[i]];
    switch (kind) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
    }
  }
  return finish<T>(std::move(shape), std::move(out), {a, b},
                   [a, b, kind, ia = std::move(ia), ib = std::move(ib)](const std::vector<T>& g,
                                                                        const std::vector<T>&) mutable {
                     T* ga = grad_target(a);
                     T* gb = grad_target(b);
                     const auto& av = a.data();
                     const auto& bv = b.data();
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       switch (kind) {
                         case Binary::add:
                           if (ga) ga[ia[i]] += g[i];
                           if (gb) gb[ib[i]] += g[i];
                           break;
                         case Binary::sub:
                           if (ga) ga[ia[i]] += g[i];
                           if (gb) gb[ib[i]] -= g[i];
                           break;
                         case Binary::mul:
                           if (ga) ga[ia[i]] += g[i] * bv[ib[i]];
                           if (gb) gb[ib[i]] += g[i] * av[ia[i]];
                           break;
                       }
                     }
                   });
}

// f maps x -> y; df maps (x, y) -> dy/dx.
template <class T, class F, class DF>
BasicTensor<T> unary(const BasicTensor<T>& a, F f, DF df) {
  const auto& av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return finish<T>(a.shape(), std::move(out), {a},
                   [a, df](const std::vector<T>& g, const std::vector<T>& y) mutable {
                     T* ga = grad_target(a);
                     const auto& av = a.data();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(av[i], y[i]);
                   });
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Binary::add, a, b);
}
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Binary::sub, a, b);
}
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Binary::mul, a, b);
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  return unary(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value) {
  return unary(a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return unary(a, [](T x) { return stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return unary(a, [](T x) { return x > T(0) || std::isnan(x) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
BasicTensor<T> pow(const BasicTensor<T>& a, T p) {
  return unary(
      a, [p](T x) { return p == T(0) ? T(1) : std::pow(x, p); },
      [p](T x, T) {
        if (p == T(0)) return T(0);
        if (x == T(0)) return p == T(1) ? T(1) : T(0);
        return p * std::pow(x, p - T(1));
      });
}

template <class T>
BasicTensor<T> elementwise(Elementwise kind, const BasicTensor<T>& a, const BasicTensor<T>* b, T factor) {
  auto need_b = [&]() -> const BasicTensor<T>& {
    if (!b || !b->defined()) throw ShapeError("binary elementwise operator needs a second operand");
    return *b;
  };
  switch (kind) {
    case Elementwise::add: return add(a, need_b());
    case Elementwise::sub: return sub(a, need_b());
    case Elementwise::mul:
    case Elementwise::broadcast_mul: return mul(a, need_b());
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::tanh: return tanh(a);
    case Elementwise::relu: return relu(a);
    case Elementwise::exp: return exp(a);
    case Elementwise::log: return log(a);
    case Elementwise::scale: return scale(a, factor);
  }
  throw ContractError("unknown elementwise kind");
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return finish<T>(Shape{1}, {acc}, {a}, [a](const std::vector<T>& g, const std::vector<T>&) mutable {
    T* ga = grad_target(a);
    for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(M * N, T(0));
  // out[i,j] accumulates over k in ascending order.
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = av[i * K + k];
      for (std::size_t j = 0; j < N; ++j) out[i * N + j] += aik * bv[k * N + j];
    }
  return finish<T>(Shape{M, N}, std::move(out), {a, b},
                   [a, b, M, K, N](const std::vector<T>& g, const std::vector<T>&) mutable {
                     T* ga = grad_target(a);
                     T* gb = grad_target(b);
                     const auto& av = a.data();
                     const auto& bv = b.data();
                     if (ga)
                       for (std::size_t i = 0; i < M; ++i)
                         for (std::size_t k = 0; k < K; ++k) {
                           T acc = 0;
                           for (std::size_t j = 0; j < N; ++j) acc += g[i * N + j] * bv[k * N + j];
                           ga[i * K + k] += acc;
                         }
                     if (gb)
                       for (std::size_t i = 0; i < M; ++i)
                         for (std::size_t k = 0; k < K; ++k) {
                           const T aik = av[i * K + k];
                           for (std::size_t j = 0; j < N; ++j) gb[k * N + j] += aik * g[i * N + j];
                         }
                   });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t R = a.dim(0), C = a.dim(1);
  std::vector<T> out(R * C);
  const auto& av = a.data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = av[r * C + c];
  return finish<T>(Shape{C, R}, std::move(out), {a},
                   [a, R, C](const std::vector<T>& g, const std::vector<T>&) mutable {
                     T* ga = grad_target(a);
                     for (std::size_t r = 0; r < R; ++r)
                       for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += g[c * R + r];
                   });
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  const std::size_t N = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(O) + " outputs");
  const auto& xv = x.data();
  const auto& wv = w.data();
  std::vector<T> out(N * O);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      T acc = bias.defined() ? bias.data()[o] : T(0);
      const T* xr = &xv[n * I];
      const T* wr = &wv[o * I];
      for (std::size_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
      out[n * O + o] = acc;
    }
  return finish<T>(Shape{N, O}, std::move(out), {x, w, bias},
                   [x, w, bias, N, I, O](const std::vector<T>& g, const std::vector<T>&) mutable {
                     T* gx = grad_target(x);
                     T* gw = grad_target(w);
                     T* gbias = bias.defined() ? grad_target(bias) : nullptr;
                     const auto& xv = x.data();
                     const auto& wv = w.data();
                     for (std::size_t n = 0; n < N; ++n)
                       for (std::size_t o = 0; o < O; ++o) {
                         const T go = g[n * O + o];
                         if (gbias) gbias[o] += go;
                         if (gx)
                           for (std::size_t i = 0; i < I; ++i) gx[n * I + i] += go * wv[o * I + i];
                         if (gw)
                           for (std::size_t i = 0; i < I; ++i) gw[o * I + i] += go * xv[n * I + i];
                       }
                   });
}

namespace {

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  return finish<T>(x.shape(), std::move(out), {x}, [x, s](const std::vector<T>& g, const std::vector<T>& y) mutable {
    T* gx = grad_target(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t i = base + k * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
  });
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(xv[base + k * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] = xv[base + k * s.inner] - lse;
    }
  return finish<T>(x.shape(), std::move(out), {x}, [x, s](const std::vector<T>& g, const std::vector<T>& y) mutable {
    T* gx = grad_target(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T gsum = 0;
        for (std::size_t k = 0; k < s.extent; ++k) gsum += g[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t i = base + k * s.inner;
          gx[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
  });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return finish<T>(std::move(shape), std::move(out), {a}, [a](const std::vector<T>& g, const std::vector<T>&) mutable {
    T* ga = grad_target(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range for " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != axis && p.shape()[d] != ref[d])
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(ref));
    shape[axis] += p.shape()[axis];
  }
  const auto s = split_axis(shape, axis);
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t ext = p.shape()[axis];
    const auto& pv = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(&pv[o * ext * s.inner], ext * s.inner, &out[(o * s.extent + off) * s.inner]);
    off += ext;
  }
  return finish_n<T>(std::move(shape), std::move(out), parts,
                     [parts, s, offsets, axis](const std::vector<T>& g, const std::vector<T>&) mutable {
                       for (std::size_t p = 0; p < parts.size(); ++p) {
                         T* gp = grad_target(parts[p]);
                         if (!gp) continue;
                         const std::size_t ext = parts[p].shape()[axis];
                         for (std::size_t o = 0; o < s.outer; ++o)
                           for (std::size_t i = 0; i < ext * s.inner; ++i)
                             gp[o * ext * s.inner + i] += g[(o * s.extent + offsets[p]) * s.inner + i];
                       }
                     });
}

template <class T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin >= end || end > a.dim(0))
    throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_str(a.shape()));
  const std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.data().begin() + begin * row, a.data().begin() + end * row);
  return finish<T>(std::move(shape), std::move(out), {a},
                   [a, begin, row](const std::vector<T>& g, const std::vector<T>&) mutable {
                     T* ga = grad_target(a) + begin * row;
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   });
}

template <class T>
BasicTensor<T> select(const BasicTensor<T>& a, std::size_t index) {
  auto rows = slice_rows(a, index, index + 1);
  Shape shape(a.shape().begin() + 1, a.shape().end());
  if (shape.empty()) shape = {1};
  return reshape(rows, std::move(shape));
}

template <class T>
BasicTensor<T> stack(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ContractError("stack of zero tensors");
  std::vector<BasicTensor<T>> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts.front().shape())
      throw ShapeError("stack: " + shape_str(p.shape()) + " vs " + shape_str(parts.front().shape()));
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(p, std::move(s)));
  }
  return concat(lifted, 0);
}

template <class T>
BasicTensor<T> pick(const BasicTensor<T>& x, const std::vector<std::size_t>& index) {
  if (x.rank() != 2 || index.size() != x.dim(0))
    throw ShapeError("pick: " + shape_str(x.shape()) + " with " + std::to_string(index.size()) + " indices");
  const std::size_t C = x.dim(1);
  std::vector<T> out(index.size());
  for (std::size_t n = 0; n < index.size(); ++n) {
    if (index[n] >= C)
      throw ContractError("pick: index " + std::to_string(index[n]) + " out of range " + std::to_string(C));
    out[n] = x.data()[n * C + index[n]];
  }
  return finish<T>(Shape{index.size()}, std::move(out), {x},
                   [x, index, C](const std::vector<T>& g, const std::vector<T>&) mutable {
                     T* gx = grad_target(x);
                     for (std::size_t n = 0; n < index.size(); ++n) gx[n * C + index[n]] += g[n];
                   });
}

template <class T>
BasicTensor<T> masked_logsumexp(const BasicTensor<T>& x, const std::vector<std::uint8_t>& mask) {
  if (x.rank() != 2 || mask.size() != x.numel())
    throw ShapeError("masked_logsumexp: " + shape_str(x.shape()) + " with mask of " + std::to_string(mask.size()));
  const std::size_t N = x.dim(0), M = x.dim(1);
  const auto& xv = x.data();
  std::vector<T> out(N);
  std::vector<T> rowmax(N);
  for (std::size_t n = 0; n < N; ++n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < M; ++j)
      if (mask[n * M + j]) mx = std::max(mx, xv[n * M + j]);
    if (mx == -std::numeric_limits<T>::infinity())
      throw ContractError("masked_logsumexp: row " + std::to_string(n) + " selects nothing");
    T total = 0;
    for (std::size_t j = 0; j < M; ++j)
      if (mask[n * M + j]) total += std::exp(xv[n * M + j] - mx);
    out[n] = mx + std::log(total);
  }
  return finish<T>(Shape{N}, std::move(out), {x},
                   [x, mask, N, M](const std::vector<T>& g, const std::vector<T>& y) mutable {
                     T* gx = grad_target(x);
                     const auto& xv = x.data();
                     for (std::size_t n = 0; n < N; ++n)
                       for (std::size_t j = 0; j < M; ++j)
                         if (mask[n * M + j]) gx[n * M + j] += g[n] * std::exp(xv[n * M + j] - y[n]);
                   });
}

template <class T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("l2_normalize_rows expects [N,D], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), D = x.dim(1);
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  std::vector<T> norms(N);
  for (std::size_t n = 0; n < N; ++n) {
    T ss = 0;
    for (std::size_t d = 0; d < D; ++d) ss += xv[n * D + d] * xv[n * D + d];
    // Floor keeps an all-zero row finite.
    norms[n] = std::max(std::sqrt(ss), T(1e-12));
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] = xv[n * D + d] / norms[n];
  }
  return finish<T>(x.shape(), std::move(out), {x},
                   [x, norms, N, D](const std::vector<T>& g, const std::vector<T>& y) mutable {
                     T* gx = grad_target(x);
                     for (std::size_t n = 0; n < N; ++n) {
                       T dot = 0;
                       for (std::size_t d = 0; d < D; ++d) dot += g[n * D + d] * y[n * D + d];
                       for (std::size_t d = 0; d < D; ++d)
                         gx[n * D + d] += (g[n * D + d] - y[n * D + d] * dot) / norms[n];
                     }
                   });
}

#define CAKE_INSTANTIATE_OPS(T)                                                                          \
  template BasicTensor<T> elementwise(Elementwise, const BasicTensor<T>&, const BasicTensor<T>*, T);      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                           \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> tanh(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> log(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> pow(const BasicTensor<T>&, T);                                                  \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                               \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);    \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                    \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&, std::size_t);                                \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                          \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                        \
  template BasicTensor<T> select(const BasicTensor<T>&, std::size_t);                                     \
  template BasicTensor<T> slice_rows(const BasicTensor<T>&, std::size_t, std::size_t);                    \
  template BasicTensor<T> stack(const std::vector<BasicTensor<T>>&);                                      \
  template BasicTensor<T> pick(const BasicTensor<T>&, const std::vector<std::size_t>&);                   \
  template BasicTensor<T> masked_logsumexp(const BasicTensor<T>&, const std::vector<std::uint8_t>&);      \
  template BasicTensor<T> l2_normalize_rows(const BasicTensor<T>&);

CAKE_INSTANTIATE_OPS(float)
CAKE_INSTANTIATE_OPS(double)

}  // namespace cake
