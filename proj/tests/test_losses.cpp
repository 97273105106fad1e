// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "cake/autograd.hpp"
#include "cake/grad_check.hpp"
#include "cake/losses.hpp"
#include "cake/ops.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cake;
using cake::testing::Gen;

namespace {

// Direct evaluation of the contrastive objective from similarity sums.
double supcon_reference(const std::vector<double>& q, Label yq, const std::vector<double>& kp,
                        const std::vector<std::vector<double>>& bank, const std::vector<Label>& labels, double tau,
                        Label bg, bool floating) {
  auto S = [&](const std::vector<double>& k) {
    double d = 0;
    for (std::size_t i = 0; i < q.size(); ++i) d += q[i] * k[i];
    return std::exp(d / tau);
  };
  const double sp = S(kp);
  double num = sp, den = sp;
  for (std::size_t m = 0; m < bank.size(); ++m) {
    const double s = S(bank[m]);
    if (floating && yq == bg) {
      if (labels[m] != bg) den += s;
    } else {
      den += s;
      if (labels[m] == yq) num += s;
    }
  }
  return -std::log(num / den);
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const std::size_t D = t.dim(1);
  return {t.data().begin() + r * D, t.data().begin() + (r + 1) * D};
}

LossWeights weights(double tau = 0.07) {
  LossWeights w;
  w.temperature = tau;
  return w;
}

}  // namespace

TEST_CASE("LossWeights validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.temperature = 0;
  CHECK_THROWS_AS(w.validate(), ContractError);
  w = {};
  w.focal_gamma = -1;
  CHECK_THROWS_AS(w.validate(), ContractError);
  w = {};
  w.focal_alpha = 0;
  CHECK_THROWS_AS(w.validate(), ContractError);
  w.focal_alpha = 1;
  CHECK_NOTHROW(w.validate());
}

TEST_CASE("distill_loss") {
  Gen g(1);
  auto z = g.tensor({3, 4});
  CHECK(distill_loss(z, z).item() == 0.0f);
  CHECK(distill_loss(Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 0})).item() == doctest::Approx(1.0));
  CHECK_THROWS_AS(distill_loss(Tensor::ones({2, 3}), Tensor::ones({3, 2})), ShapeError);

  auto t = g.tensor<double>({4, 5}), m = g.tensor<double>({4, 5}, -1, 1, true);
  {
    GradTape tape;
    backward(distill_loss(t, m));
    auto gm = m.grad();
    for (std::size_t i = 0; i < gm.size(); ++i) CHECK(std::abs(gm[i] - 2 * (m[i] - t[i]) / 4) < 1e-12);
  }
  CHECK(grad_check<double>([&] { return distill_loss(t, m); }, {m}).pass);
}

TEST_CASE("cross_entropy and label checks") {
  Tensor logits({2, 3}, {1, 2, 3, 0, 0, 0});
  auto ce = cross_entropy_rows(logits, {2, 1});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(ce[0] == doctest::Approx(-std::log(std::exp(3.0) / z)));
  CHECK(ce[1] == doctest::Approx(std::log(3.0)));
  CHECK_THROWS_AS(cross_entropy(logits, {3, 0}), ContractError);
  CHECK_THROWS_AS(cross_entropy(logits, {0}), ShapeError);
}

TEST_CASE("focal_loss examples") {
  // Logits {0, 0} give p_t = 0.5.
  auto f = focal_loss(Tensor({1, 2}, {0, 0}), {0}, 2.0, 0.25);
  CHECK(std::abs(f.item() - 0.25 * 0.25 * std::log(2.0)) < 1e-6);
  CHECK(std::abs(f.item() - 0.04332) < 1e-5);
  auto sure = focal_loss(Tensor({1, 3}, {30, 0, 0}), {0}, 2.0, 0.25);
  CHECK(sure.item() < 1e-20);
  CHECK(sure.item() >= 0);
}

TEST_CASE("focal_loss with gamma 0 and alpha 1 is cross-entropy (property)") {
  Gen g(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t N = 1 + g.index(6), C = 2 + g.index(6);
    auto logits = g.tensor({N, C}, -4, 4);
    std::vector<Label> y(N);
    for (auto& v : y) v = Label(g.index(C));
    CHECK(std::abs(focal_loss(logits, y, 0.0, 1.0).item() - cross_entropy(logits, y).item()) < 1e-6);
  }
}

TEST_CASE("focal_loss passes grad_check") {
  Gen g(3);
  auto logits = g.tensor<double>({4, 5}, -3, 3);
  CHECK(grad_check<double>([&] { return focal_loss(logits, {0, 4, 2, 2}, 2.0, 0.25); }, {logits}).pass);
  CHECK(grad_check<double>([&] { return focal_loss(logits, {1, 3, 0, 2}, 0.5, 0.7); }, {logits}).pass);
}

TEST_CASE("masked_temporal_loss") {
  Gen g(4);
  auto logits = g.tensor<double>({4, 5}, -2, 2, true);
  std::vector<Label> y{1, 0, 3, 4};
  auto per_step = cross_entropy_rows(logits, y);
  auto loss = masked_temporal_loss(logits, y);
  CHECK(loss.item() == per_step[3]);
  auto mask = final_step_mask(4);
  double dot = 0;
  for (std::size_t t = 0; t < 4; ++t) dot += per_step[t] * mask[t];
  CHECK(loss.item() == doctest::Approx(dot).epsilon(1e-15));
  {
    GradTape tape;
    backward(masked_temporal_loss(logits, y));
    auto gl = logits.grad();
    for (std::size_t i = 0; i < 15; ++i) CHECK(gl[i] == 0.0);
    double s = 0;
    for (std::size_t i = 15; i < 20; ++i) s += gl[i];
    CHECK(std::abs(s) < 1e-12);
  }
  CHECK(grad_check<double>([&] { return masked_temporal_loss(logits, y); }, {logits}).pass);
  CHECK_THROWS_AS(masked_temporal_loss(logits, {1, 0, 3, 5}), ContractError);
  CHECK_THROWS_AS(final_step_mask(0), ContractError);

  // Focal variant and the batched layout.
  auto foc = masked_temporal_loss(logits, y, StepLoss::focal, 2.0, 0.25);
  CHECK(foc.item() == doctest::Approx(focal_loss(slice_rows(logits, 3, 4), {4}, 2.0, 0.25).item()));
  auto batched = g.tensor<double>({2, 3, 4});
  std::vector<Label> yb{0, 1, 2, 3, 2, 1};
  auto lb = masked_temporal_loss(batched, yb);
  auto rows = cross_entropy_rows(reshape(batched, {6, 4}), yb);
  CHECK(lb.item() == doctest::Approx((rows[2] + rows[5]) / 2));
}

TEST_CASE("similarity examples") {
  std::vector<float> a{1, 0, 0}, b{0, 1, 0}, neg{-1, 0, 0};
  CHECK(similarity(a, a, 1.0) == doctest::Approx(std::exp(1.0)));
  CHECK(similarity(a, b, 1.0) == doctest::Approx(1.0));
  CHECK(similarity(a, neg, 0.07) == doctest::Approx(6.2e-7).epsilon(0.01));
  CHECK(similarity(a, neg, 0.07) == doctest::Approx(std::exp(-1.0 / 0.07)));
}

TEST_CASE("ContrastQueue") {
  ContrastQueue q(2, 2);
  Tensor keys({3, 2}, {1, 0, 0, 1, -1, 0});
  q.push(keys, {1, 2, 3});
  REQUIRE(q.size() == 2);
  auto k = q.keys();
  CHECK(k[0] == 0.0f);
  CHECK(k[1] == 1.0f);
  CHECK(k[2] == -1.0f);
  CHECK(q.labels() == std::vector<Label>{2, 3});

  q.push(Tensor({2, 2}, {0.6f, 0.8f, 0.8f, -0.6f}), {5, 6});
  CHECK(q.labels() == std::vector<Label>{5, 6});
  CHECK(q.keys()[0] == doctest::Approx(0.6));

  CHECK_THROWS_AS(q.push(Tensor({1, 2}, {1.1f, 0}), {1}), ContractError);
  CHECK(q.labels() == std::vector<Label>{5, 6});
  CHECK_THROWS_AS(q.push(Tensor({1, 3}, {1, 0, 0}), {1}), ShapeError);
  CHECK_NOTHROW(q.push(Tensor({1, 2}, {1.0005f, 0}), {1}));
  CHECK(q.keys()[2] == 1.0f);  // stored renormalised
}

TEST_CASE("ContrastQueue is FIFO with unit-norm keys (property)") {
  Gen g(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t cap = 1 + g.index(8), dim = 1 + g.index(5);
    ContrastQueue q(cap, dim);
    std::vector<Label> pushed;
    for (int b = 0; b < 6; ++b) {
      const std::size_t n = 1 + g.index(4);
      std::vector<Label> labels(n);
      for (auto& l : labels) l = Label(pushed.size() + (&l - labels.data()));
      q.push(g.unit_rows(n, dim), labels);
      pushed.insert(pushed.end(), labels.begin(), labels.end());
      CHECK(q.size() == std::min(cap, pushed.size()));
      std::vector<Label> expect(pushed.end() - long(q.size()), pushed.end());
      CHECK(q.labels() == expect);
      auto k = q.keys();
      for (std::size_t r = 0; r < q.size(); ++r) {
        double n2 = 0;
        for (std::size_t j = 0; j < dim; ++j) n2 += double(k[r * dim + j]) * k[r * dim + j];
        CHECK(std::abs(std::sqrt(n2) - 1) <= 1e-5);
      }
    }
  }
}

TEST_CASE("floating supcon examples") {
  LossWeights w = weights(1.0);
  w.background = 0;
  Tensor q({1, 2}, {1, 0}), kp({1, 2}, {1, 0});

  ContrastQueue bg_only(4, 2);
  bg_only.push(Tensor({2, 2}, {0, 1, 1, 0}), {0, 0});
  CHECK(floating_supcon_loss(q, {0}, kp, bg_only, w).item() == 0.0f);

  ContrastQueue empty(4, 2);
  CHECK(floating_supcon_loss(q, {3}, kp, empty, w).item() == 0.0f);
  CHECK(floating_supcon_loss(q, {0}, kp, empty, w).item() == 0.0f);

  // dots: q.k+ = 1, q.k1 = 0.5 (same class), q.k2 = 0 (other class).
  const float c = std::sqrt(0.75f);
  ContrastQueue mixed(4, 2);
  mixed.push(Tensor({2, 2}, {0.5f, c, 0, 1}), {3, 5});
  const double expect = -std::log((std::exp(1.0) + std::exp(0.5)) / (std::exp(1.0) + std::exp(0.5) + 1.0));
  const double brute = supcon_reference({1, 0}, 3, {1, 0}, {{0.5, c}, {0, 1}}, {3, 5}, 1.0, 0, true);
  auto got = floating_supcon_loss(q, {3}, kp, mixed, w).item();
  CHECK(std::abs(got - expect) < 1e-6);
  CHECK(std::abs(got - brute) < 1e-6);
  // Exact value is 0.20620; the commonly quoted 0.2058 is a rounding slip.
  CHECK(std::abs(got - 0.2062) < 1e-4);
  CHECK(std::abs(got - 0.2058) < 1e-3);
}

TEST_CASE("supcon matches the direct similarity-sum evaluation (property)") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Gen g(1000 + seed);
    const std::size_t B = 1 + g.index(4), M = g.index(10), D = 2 + g.index(6);
    auto q = g.unit_rows(B, D), kp = g.unit_rows(B, D);
    std::vector<Label> yq(B);
    for (auto& y : yq) y = Label(g.index(4));
    ContrastQueue queue(16, D);
    std::vector<Label> yk(M);
    for (auto& y : yk) y = Label(g.index(4));
    if (M) queue.push(g.unit_rows(M, D), yk);
    auto keys = queue.keys();
    std::vector<std::vector<double>> bank;
    for (std::size_t m = 0; m < M; ++m) bank.push_back(row(keys, m));
    const double tau = g.uniform(0.05, 1.0);
    for (bool floating : {true, false}) {
      double ref = 0;
      for (std::size_t b = 0; b < B; ++b)
        ref += supcon_reference(row(q, b), yq[b], row(kp, b), bank, yk, tau, 0, floating);
      ref /= double(B);
      auto got = floating_supcon_loss(q, yq, kp, queue, weights(tau),
                                      floating ? ContrastMode::floating : ContrastMode::standard);
      CHECK(std::abs(got.item() - ref) <= 1e-4 * std::max(1.0, std::abs(ref)));
      CHECK(got.item() >= 0.0f);
    }
  }
}

TEST_CASE("background keys get exactly zero gradient from a background query") {
  Gen g(6);
  const std::size_t D = 4, M = 6;
  auto q = g.unit_rows<double>(1, D);
  auto kp = g.unit_rows<double>(1, D);
  auto bank = g.unit_rows<double>(M, D);
  bank.set_requires_grad(true);
  std::vector<Label> yk{0, 2, 0, 1, 0, 2};
  GradTape tape;
  backward(supcon_loss(q, {0}, kp, bank, yk, weights(0.1)));
  auto gb = bank.grad();
  for (std::size_t m = 0; m < M; ++m) {
    double n = 0;
    for (std::size_t j = 0; j < D; ++j) n += std::abs(gb[m * D + j]);
    if (yk[m] == 0)
      CHECK(n == 0.0);
    else
      CHECK(n > 0.0);
  }
}

TEST_CASE("queued keys are detached") {
  Gen g(7);
  ContrastQueue queue(8, 3);
  queue.push(g.unit_rows(4, 3), {1, 1, 2, 0});
  auto q = g.unit_rows(2, 3);
  q.set_requires_grad(true);
  GradTape tape;
  auto loss = floating_supcon_loss(q, {1, 0}, g.unit_rows(2, 3), queue, weights());
  CHECK_FALSE(queue.keys().requires_grad());
  backward(loss);
  CHECK(q.has_grad());
}

TEST_CASE("raising a same-class dot product lowers the action loss (property)") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Gen g(1100 + seed);
    const double tau = 0.2;
    std::vector<double> q{1, 0, 0}, kp{0.6, 0.8, 0};
    std::vector<std::vector<double>> bank;
    std::vector<Label> yk;
    for (int m = 0; m < 5; ++m) {
      auto r = g.unit_rows<double>(1, 3);
      bank.push_back({r[0], r[1], r[2]});
      yk.push_back(Label(1 + g.index(2)));
    }
    yk[0] = 1;
    double prev = 1e9;
    // Rotate the same-class key towards q; dot = cos(theta) grows.
    for (int step = 0; step <= 10; ++step) {
      const double th = M_PI * (1.0 - step / 10.0);
      bank[0] = {std::cos(th), std::sin(th), 0};
      const double l = supcon_reference(q, 1, kp, bank, yk, tau, 0, true);
      TensorD qt({1, 3}, q), kt({1, 3}, kp);
      std::vector<double> flat;
      for (auto& b : bank) flat.insert(flat.end(), b.begin(), b.end());
      auto got = supcon_loss(qt, {1}, kt, TensorD({5, 3}, flat), yk, weights(tau)).item();
      CHECK(std::abs(got - l) < 1e-12);
      if (step > 0) CHECK(got < prev);
      prev = got;
    }
  }
}

TEST_CASE("supcon passes grad_check") {
  Gen g(8);
  auto q = g.unit_rows<double>(3, 4), kp = g.unit_rows<double>(3, 4), bank = g.unit_rows<double>(5, 4);
  std::vector<Label> yq{0, 1, 2}, yk{0, 1, 1, 2, 0};
  for (auto mode : {ContrastMode::floating, ContrastMode::standard})
    CHECK(grad_check<double>([&] { return supcon_loss(q, yq, kp, bank, yk, weights(0.5), mode); }, {q, kp, bank})
              .pass);
  CHECK(grad_check<double>([&] { return supcon_loss(q, yq, kp, TensorD(), {}, weights(0.5)); }, {q, kp}).pass);
}

TEST_CASE("ema_update") {
  auto make = [](float kv, float qv, double m) {
    auto s = MomentumEncoderState::mirror({Tensor::full({2, 2}, qv)}, m);
    for (auto& v : s.key_params[0].mutable_data()) v = kv;
    return s;
  };
  auto s1 = make(0.3f, 1.0f, 1.0);
  ema_update(s1);
  CHECK(s1.key_params[0][0] == 0.3f);
  auto s0 = make(0.3f, 1.0f, 0.0);
  ema_update(s0);
  CHECK(s0.key_params[0][0] == 1.0f);
  auto s = make(0.0f, 1.0f, 0.999);
  ema_update(s);
  CHECK(s.key_params[0][3] == doctest::Approx(0.001).epsilon(1e-4));

  auto mism = make(0, 1, 0.5);
  mism.key_params[0] = Tensor::zeros({4});
  CHECK_THROWS_AS(ema_update(mism), ShapeError);
  auto bad = make(0, 1, 1.5);
  CHECK_THROWS_AS(ema_update(bad), ContractError);

  // Mirror copies values without aliasing.
  Tensor qp({2}, {1, 2}, true);
  auto m = MomentumEncoderState::mirror({qp}, 0.9);
  qp.mutable_data()[0] = 5;
  CHECK(m.key_params[0][0] == 1.0f);
  CHECK_FALSE(m.key_params[0].requires_grad());
}

TEST_CASE("ema gap shrinks geometrically (property)") {
  for (double mom : {0.5, 0.9, 0.99}) {
    auto s = MomentumEncoderState::mirror({Tensor::full({3}, 1.0f)}, mom);
    for (auto& v : s.key_params[0].mutable_data()) v = 0.0f;
    for (int step = 1; step <= 50; ++step) {
      ema_update(s);
      const double gap = 1.0 - s.key_params[0][0];
      CHECK(std::abs(gap - std::pow(mom, step)) < 1e-6);
    }
  }
}
