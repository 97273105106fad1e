// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "cake/autograd.hpp"
#include "cake/grad_check.hpp"
#include "cake/nn.hpp"
#include "cake/ops.hpp"
#include "cake/parallel.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cake;
using cake::testing::Gen;
using cake::testing::as_double;
using cake::testing::conv3d_reference;
using cake::testing::max_abs_diff;

namespace {

Conv3dSpec make_spec(std::size_t cin, std::size_t cout, std::array<std::size_t, 3> k, std::array<std::size_t, 3> pad,
                     std::size_t groups = 1, std::array<std::size_t, 3> stride = {1, 1, 1}) {
  Conv3dSpec s;
  s.in_channels = cin;
  s.out_channels = cout;
  s.kernel = k;
  s.padding = pad;
  s.groups = groups;
  s.stride = stride;
  return s;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("Conv3dSpec arithmetic") {
  auto s = make_spec(4, 6, {3, 3, 3}, {1, 1, 1}, 2);
  CHECK_NOTHROW(s.validate());
  CHECK(s.weight_shape() == Shape{6, 2, 3, 3, 3});
  CHECK(s.output_extents(5, 7, 7) == std::array<std::size_t, 3>{5, 7, 7});
  CHECK_THROWS_AS(make_spec(3, 6, {1, 1, 1}, {0, 0, 0}, 2).validate(), ShapeError);
  CHECK_THROWS_AS(make_spec(2, 2, {3, 3, 3}, {0, 0, 0}).output_extents(2, 5, 5), ShapeError);
  auto strided = make_spec(1, 1, {1, 3, 3}, {0, 1, 1}, 1, {1, 2, 2});
  CHECK(strided.output_extents(4, 7, 8) == std::array<std::size_t, 3>{4, 4, 4});
}

TEST_CASE("conv3d examples") {
  Gen g(1);
  auto x = g.tensor({1, 1, 3, 4, 5});
  auto y = conv3d(x, Tensor({1, 1, 1, 1, 1}, {1}), make_spec(1, 1, {1, 1, 1}, {0, 0, 0}));
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

  const float c = 0.75f;
  auto box = conv3d(Tensor::full({1, 1, 5, 5, 5}, c), Tensor::ones({1, 1, 3, 3, 3}),
                    make_spec(1, 1, {3, 3, 3}, {1, 1, 1}));
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t h = 1; h < 4; ++h)
      for (std::size_t w = 1; w < 4; ++w) CHECK(box[(t * 5 + h) * 5 + w] == doctest::Approx(27 * c));
  CHECK(box[0] == doctest::Approx(8 * c));  // corner sees 2x2x2 taps

  CHECK_THROWS_AS(conv3d(g.tensor({1, 3, 2, 4, 4}), g.tensor({2, 2, 1, 1, 1}), make_spec(2, 2, {1, 1, 1}, {0, 0, 0})),
                  ShapeError);
}

TEST_CASE("conv3d matches the nested-loop reference") {
  struct Case {
    Shape xs;
    Conv3dSpec spec;
  };
  std::vector<Case> cases{
      {{1, 2, 4, 6, 6}, make_spec(2, 3, {3, 3, 3}, {1, 1, 1})},
      {{2, 4, 3, 5, 5}, make_spec(4, 4, {3, 3, 3}, {1, 1, 1}, 4)},
      {{2, 4, 5, 4, 6}, make_spec(4, 6, {3, 1, 1}, {1, 0, 0}, 2)},
      {{1, 3, 3, 7, 6}, make_spec(3, 2, {1, 3, 3}, {0, 1, 1}, 1, {1, 2, 2})},
      {{1, 2, 4, 5, 5}, make_spec(2, 2, {2, 2, 3}, {0, 0, 2})},
  };
  Gen g(2);
  for (const auto& c : cases) {
    auto x = g.tensor(c.xs);
    auto w = g.tensor(c.spec.weight_shape());
    auto y = conv3d(x, w, c.spec);
    Shape ref_shape;
    auto ref = conv3d_reference(as_double(x), x.shape(), as_double(w), w.shape(), c.spec.stride, c.spec.padding,
                                c.spec.groups, ref_shape);
    REQUIRE(y.shape() == ref_shape);
    CHECK(max_abs_diff(y.data(), ref) < 1e-6 * 8);
  }
  // Tight tolerance in double.
  auto x = g.tensor<double>({1, 2, 4, 6, 6});
  auto w = g.tensor<double>({3, 2, 3, 3, 3});
  auto s = make_spec(2, 3, {3, 3, 3}, {1, 1, 1});
  Shape rs;
  auto ref = conv3d_reference(as_double(x), x.shape(), as_double(w), w.shape(), s.stride, s.padding, 1, rs);
  CHECK(max_abs_diff(conv3d(x, w, s).data(), ref) < 1e-12);
}

TEST_CASE("conv3d is linear in x and in w (property)") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Gen g(300 + seed);
    auto spec = make_spec(2, 3, {3, 3, 3}, {1, 1, 1});
    auto x = g.tensor({1, 2, 3, 4, 4});
    auto w1 = g.tensor(spec.weight_shape()), w2 = g.tensor(spec.weight_shape());
    const float alpha = float(g.uniform(-2, 2));
    auto lhs = conv3d(scale(x, alpha), w1, spec), rhs = scale(conv3d(x, w1, spec), alpha);
    CHECK(max_abs_diff(lhs.data(), rhs.data()) < 1e-5);
    auto sum_w = conv3d(x, add(w1, w2), spec);
    auto sum_y = add(conv3d(x, w1, spec), conv3d(x, w2, spec));
    CHECK(max_abs_diff(sum_w.data(), sum_y.data()) < 1e-5);
  }
}

TEST_CASE("depthwise then pointwise equals the full separable convolution") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Gen g(400 + seed);
    const std::size_t C = 3, O = 4;
    auto x = g.tensor({2, C, 4, 5, 5});
    auto dw = g.tensor({C, 1, 3, 3, 3});
    auto pw = g.tensor({O, C, 1, 1, 1});
    auto sep = conv3d(conv3d(x, dw, make_spec(C, C, {3, 3, 3}, {1, 1, 1}, C)), pw, make_spec(C, O, {1, 1, 1}, {0, 0, 0}));
    std::vector<float> full(O * C * 27);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < 27; ++k) full[(o * C + c) * 27 + k] = pw[o * C + c] * dw[c * 27 + k];
    auto direct = conv3d(x, Tensor({O, C, 3, 3, 3}, full), make_spec(C, O, {3, 3, 3}, {1, 1, 1}));
    CHECK(max_abs_diff(sep.data(), direct.data()) < 1e-5);
  }
}

TEST_CASE("conv3d output is independent of the thread count") {
  Gen g(9);
  auto x = g.tensor({2, 8, 6, 12, 12}, -1, 1, true);
  auto spec = make_spec(8, 8, {3, 3, 3}, {1, 1, 1});
  auto w = g.tensor(spec.weight_shape(), -1, 1, true);
  auto run = [&](std::size_t threads) {
    set_num_threads(threads);
    x.zero_grad();
    w.zero_grad();
    GradTape tape;
    auto y = conv3d(x, w, spec);
    backward(sum(mul(y, y)));
    std::vector<float> out(y.data().begin(), y.data().end());
    auto gx = x.grad(), gw = w.grad();
    out.insert(out.end(), gx.begin(), gx.end());
    out.insert(out.end(), gw.begin(), gw.end());
    return out;
  };
  auto one = run(1);
  CHECK(one == run(4));
  set_num_threads(1);
}

TEST_CASE("conv3d passes grad_check") {
  Gen g(10);
  struct Case {
    Shape xs;
    Conv3dSpec spec;
  };
  std::vector<Case> cases{{{1, 2, 3, 4, 4}, make_spec(2, 3, {3, 3, 3}, {1, 1, 1})},
                          {{2, 4, 3, 4, 4}, make_spec(4, 4, {3, 3, 3}, {1, 1, 1}, 4)},
                          {{1, 2, 3, 5, 5}, make_spec(2, 2, {1, 3, 3}, {0, 1, 1}, 1, {1, 2, 2})}};
  for (const auto& c : cases) {
    auto x = g.tensor<double>(c.xs);
    auto w = g.tensor<double>(c.spec.weight_shape());
    auto probe = g.tensor<double>(conv3d(x, w, c.spec).shape());
    auto rep = grad_check<double>([&] { return sum(mul(conv3d(x, w, c.spec), probe)); }, {x, w});
    CHECK(rep.pass);
  }
}

TEST_CASE("pooling") {
  auto p = global_avg_pool(Tensor::full({2, 3, 2, 2, 2}, 1.5f));
  CHECK(p.shape() == Shape{2, 3});
  for (std::size_t i = 0; i < 6; ++i) CHECK(p[i] == doctest::Approx(1.5));
  auto hot = Tensor::zeros({1, 1, 2, 2, 2});
  hot.mutable_data()[5] = 4.0f;
  CHECK(global_avg_pool(hot)[0] == doctest::Approx(0.5));

  Gen g(12);
  auto x = g.tensor<double>({2, 3, 3, 4, 5});
  auto m = global_avg_pool(x);
  for (std::size_t nc = 0; nc < 6; ++nc) {
    double acc = 0;
    for (std::size_t i = 0; i < 60; ++i) acc += x[nc * 60 + i];
    CHECK(std::abs(m[nc] - acc / 60) < 1e-12);
  }
  CHECK(grad_check<double>([&] { return sum(mul(global_avg_pool(x), m.detach())); }, {x}).pass);

  auto a = avg_pool3d(x, {1, 2, 2});
  CHECK(a.shape() == Shape{2, 3, 3, 2, 2});
  CHECK(std::abs(a[0] - (x[0] + x[1] + x[5] + x[6]) / 4) < 1e-12);
  auto probe = g.tensor<double>(a.shape());
  CHECK(grad_check<double>([&] { return sum(mul(avg_pool3d(x, {1, 2, 2}), probe)); }, {x}).pass);
}

TEST_CASE("linear layer") {
  Rng rng(1);
  auto lin = LinearLayer<double>::init(3, 2, rng);
  CHECK(lin.in_features() == 3);
  CHECK(lin.out_features() == 2);
  Gen g(13);
  auto x = g.tensor<double>({4, 3});
  auto y = lin.forward(x);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t o = 0; o < 2; ++o) {
      double acc = lin.bias[o];
      for (std::size_t i = 0; i < 3; ++i) acc += lin.weight[o * 3 + i] * x[n * 3 + i];
      CHECK(std::abs(y[n * 2 + o] - acc) < 1e-12);
    }
  NamedParams<double> ps;
  lin.collect(ps, "fc");
  CHECK(ps.size() == 2);
  CHECK(ps[0].first == "fc.weight");
}

TEST_CASE("gru_step examples") {
  auto cell = GruCell<float>::zeros(3, 4);
  auto h = gru_step(cell, Tensor::ones({3}), Tensor::ones({4}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(h[i] == doctest::Approx(0.5));

  Rng rng(5);
  auto copy = GruCell<float>::init(3, 4, rng);
  copy.b_z = Tensor::full({4}, 1000.0f);
  Tensor h0({4}, {0.1f, -0.4f, 0.9f, -0.2f});
  auto h1 = gru_step(copy, Tensor({3}, {0.3f, -1.0f, 2.0f}), h0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(h1[i] == doctest::Approx(h0[i]).epsilon(1e-6));

  CHECK_THROWS_AS(gru_step(copy, Tensor::ones({2}), h0), ShapeError);
}

TEST_CASE("gru_step matches a scalar evaluation of the gate formulas") {
  Rng rng(6);
  const std::size_t D = 5, H = 4;
  auto cell = GruCell<double>::init(D, H, rng);
  Gen g(14);
  auto x = g.tensor<double>({D});
  auto h = g.tensor<double>({H});
  auto out = gru_step(cell, x, h);
  auto mv = [&](const TensorD& m, const TensorD& v, std::size_t i, std::size_t cols) {
    double acc = 0;
    for (std::size_t j = 0; j < cols; ++j) acc += m[i * cols + j] * v[j];
    return acc;
  };
  for (std::size_t i = 0; i < H; ++i) {
    const double z = sigm(mv(cell.w_z, x, i, D) + mv(cell.u_z, h, i, H) + cell.b_z[i]);
    const double r = sigm(mv(cell.w_r, x, i, D) + mv(cell.u_r, h, i, H) + cell.b_r[i]);
    const double n = std::tanh(mv(cell.w_n, x, i, D) + r * (mv(cell.u_n, h, i, H) + cell.b_hn[i]) + cell.b_n[i]);
    CHECK(std::abs(out[i] - ((1 - z) * n + z * h[i])) < 1e-12);
  }
  // Batched form agrees row by row.
  auto xb = g.tensor<double>({3, D}), hb = g.tensor<double>({3, H}, -0.9, 0.9);
  auto ob = gru_step(cell, xb, hb);
  for (std::size_t b = 0; b < 3; ++b) {
    auto single = gru_step(cell, select(xb, b), select(hb, b));
    for (std::size_t i = 0; i < H; ++i) CHECK(std::abs(ob[b * H + i] - single[i]) < 1e-12);
  }
}

TEST_CASE("gru hidden state stays in (-1, 1) (property)") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto cell = GruCell<float>::init(6, 8, rng);
    Gen g(500 + seed);
    auto h = g.tensor({8}, -0.99, 0.99);
    for (int t = 0; t < 30; ++t) {
      h = gru_step(cell, g.tensor({6}, -5, 5), h);
      for (std::size_t i = 0; i < 8; ++i) {
        CHECK(h[i] > -1.0f);
        CHECK(h[i] < 1.0f);
      }
    }
  }
}

TEST_CASE("gru_sequence") {
  Rng rng(7);
  auto cell = GruCell<double>::init(3, 5, rng);
  Gen g(15);
  auto xs = g.tensor<double>({6, 3});
  auto h0 = g.tensor<double>({5}, -0.5, 0.5);
  auto seq = gru_sequence(cell, xs, h0);
  CHECK(seq.shape() == Shape{6, 5});
  auto h = h0;
  for (std::size_t t = 0; t < 6; ++t) {
    h = gru_step(cell, select(xs, t), h);
    for (std::size_t i = 0; i < 5; ++i) CHECK(seq[t * 5 + i] == h[i]);
  }
  auto one = gru_sequence(cell, slice_rows(xs, 0, 1), h0);
  auto step = gru_step(cell, select(xs, 0), h0);
  for (std::size_t i = 0; i < 5; ++i) CHECK(one[i] == step[i]);

  auto first = gru_sequence(cell, slice_rows(xs, 0, 3), h0);
  auto second = gru_sequence(cell, slice_rows(xs, 3, 6), select(first, 2));
  for (std::size_t i = 0; i < 15; ++i) {
    CHECK(first[i] == seq[i]);
    CHECK(second[i] == seq[15 + i]);
  }
}

TEST_CASE("gru_sequence with empty input is a contract error") {
  // Zero extents cannot be built as tensors, so an empty sequence arrives as
  // an undefined tensor.
  auto cell = GruCell<float>::zeros(2, 2);
  CHECK_THROWS_AS(gru_sequence(cell, Tensor(), Tensor::zeros({2})), ContractError);
}

TEST_CASE("gru converges to a fixed point under constant input on contractive cells") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(700 + seed);
    auto cell = GruCell<double>::init(4, 6, rng);
    // Shrink the recurrent matrices so the map is a contraction.
    for (auto* u : {&cell.u_z, &cell.u_r, &cell.u_n})
      for (auto& v : u->mutable_data()) v *= 0.3;
    Gen g(800 + seed);
    auto x = g.tensor<double>({4});
    auto h = TensorD::zeros({6});
    double prev = 1e9;
    for (int t = 0; t < 40; ++t) {
      auto next = gru_step(cell, x, h);
      double d = 0;
      for (std::size_t i = 0; i < 6; ++i) d += (next[i] - h[i]) * (next[i] - h[i]);
      d = std::sqrt(d);
      if (t >= 5) CHECK(d <= prev + 1e-15);
      prev = d;
      h = next;
    }
  }
}

TEST_CASE("gru_step passes grad_check") {
  Rng rng(8);
  auto cell = GruCell<double>::init(3, 4, rng);
  Gen g(16);
  auto x = g.tensor<double>({2, 3}), h = g.tensor<double>({2, 4}, -0.9, 0.9);
  auto probe = g.tensor<double>({2, 4});
  std::vector<TensorD> wrt{x, h};
  NamedParams<double> ps;
  cell.collect(ps, "gru");
  for (auto& [name, p] : ps) wrt.push_back(p);
  CHECK(ps.size() == 10);
  CHECK(grad_check<double>([&] { return sum(mul(gru_step(cell, x, h), probe)); }, wrt).pass);
  auto xs = g.tensor<double>({3, 3});
  auto h0 = g.tensor<double>({4}, -0.5, 0.5);
  CHECK(grad_check<double>([&] { return sum(gru_sequence(cell, xs, h0)); }, {xs, h0, cell.u_n, cell.b_hn}).pass);
}
