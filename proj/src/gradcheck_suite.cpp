// SPDX-License-Identifier: Apache-2.0

#include "cake/gradcheck_suite.hpp"

#include <chrono>
#include <random>
#include <set>

#include "cake/losses.hpp"
#include "cake/models.hpp"
#include "cake/nn.hpp"
#include "cake/odconv.hpp"
#include "cake/ops.hpp"
#include "record.hpp"

namespace cake {

namespace {

using D = double;
using TD = TensorD;

struct Draw {
  Rng rng;
  std::uint64_t readout_seed;
  explicit Draw(std::uint64_t seed) : rng(seed * 0x9E3779B97F4A7C15ULL + 1), readout_seed(rng()) {}

  TD tensor(Shape s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<D> v(shape_numel(s));
    for (auto& x : v) x = u(rng);
    return TD(std::move(s), std::move(v), true);
  }
  TD constant(Shape s, double lo = -1.0, double hi = 1.0) {
    auto t = tensor(std::move(s), lo, hi);
    t.set_requires_grad(false);
    return t;
  }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }
  std::vector<Label> labels(std::size_t n, std::size_t classes) {
    std::vector<Label> y(n);
    for (auto& v : y) v = Label(index(classes));
    return y;
  }
  TD unit_rows(std::size_t rows, std::size_t dim, bool grad) {
    auto t = tensor({rows, dim});
    auto d = t.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
      double n2 = 0;
      for (std::size_t j = 0; j < dim; ++j) n2 += d[r * dim + j] * d[r * dim + j];
      for (std::size_t j = 0; j < dim; ++j) d[r * dim + j] /= std::sqrt(n2);
    }
    t.set_requires_grad(grad);
    return t;
  }
};

// Contracts an output with a random readout so every coordinate of the output
// contributes to the scalar. The readout depends only on the seed and the
// shape, so repeated evaluations of f see the same function.
TD readout(const TD& y, const Draw& d) {
  std::uint64_t key = d.readout_seed;
  for (auto e : y.shape()) key = key * 1000003ULL + e;
  Rng r(key);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<D> w(y.numel());
  for (auto& v : w) v = u(r);
  return sum(mul(y, TD(y.shape(), std::move(w))));
}

GradCheckReport check(const std::function<TD()>& f, std::vector<TD> wrt) {
  return grad_check<D>(f, std::move(wrt), 1e-3, 1e-4);
}

template <class M>
std::vector<TD> params_of(const M& m, const std::string& prefix) {
  NamedParams<D> named;
  m.collect(named, prefix);
  std::vector<TD> out;
  for (auto& [n, p] : named) out.push_back(p);
  return out;
}

Conv3dSpec spec_of(std::size_t cin, std::size_t cout, std::array<std::size_t, 3> k, std::array<std::size_t, 3> pad,
                   std::size_t groups = 1, std::array<std::size_t, 3> stride = {1, 1, 1}) {
  Conv3dSpec s;
  s.in_channels = cin;
  s.out_channels = cout;
  s.kernel = k;
  s.padding = pad;
  s.stride = stride;
  s.groups = groups;
  return s;
}

std::vector<GradSuite> build() {
  std::vector<GradSuite> s;
  auto add_suite = [&](const char* module, const char* op, std::function<GradCheckReport(std::uint64_t)> f) {
    s.push_back({module, op, std::move(f)});
  };

  // tensor-core
  add_suite("tensor-core", "add_sub_mul_broadcast", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({3, 4}), b = d.tensor({4}), c = d.tensor({3, 1});
    return check([&] { return readout(mul(sub(add(a, b), c), a), d); }, {a, b, c});
  });
  add_suite("tensor-core", "scale_add_scalar", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({5});
    return check([&] { return readout(add_scalar(scale(a, 2.5), -0.5), d); }, {a});
  });
  add_suite("tensor-core", "sigmoid", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({6}, -4, 4);
    return check([&] { return readout(sigmoid(a), d); }, {a});
  });
  add_suite("tensor-core", "tanh", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({6}, -3, 3);
    return check([&] { return readout(tanh(a), d); }, {a});
  });
  add_suite("tensor-core", "relu", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({8}, -2, 2);
    return check([&] { return readout(relu(a), d); }, {a});
  });
  add_suite("tensor-core", "exp", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({6}, -2, 2);
    return check([&] { return readout(exp(a), d); }, {a});
  });
  add_suite("tensor-core", "log", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({6}, 0.2, 3.0);
    return check([&] { return readout(log(a), d); }, {a});
  });
  add_suite("tensor-core", "pow", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({6}, 0.2, 2.0);
    return check([&] { return readout(pow(a, 2.5), d); }, {a});
  });
  add_suite("tensor-core", "sum_mean", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({2, 3});
    return check([&] { return add(scale(sum(mul(a, a)), 0.5), mean(a)); }, {a});
  });
  add_suite("tensor-core", "matmul_transpose", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({3, 4}), b = d.tensor({5, 4});
    return check([&] { return readout(matmul(a, transpose(b)), d); }, {a, b});
  });
  add_suite("tensor-core", "linear", [](std::uint64_t seed) {
    Draw d(seed);
    auto x = d.tensor({3, 4}), w = d.tensor({2, 4}), b = d.tensor({2});
    return check([&] { return readout(linear(x, w, b), d); }, {x, w, b});
  });
  add_suite("tensor-core", "softmax", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({3, 5}, -3, 3);
    const std::size_t axis = d.index(2);
    return check([&] { return readout(softmax(a, axis), d); }, {a});
  });
  add_suite("tensor-core", "log_softmax", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({3, 5}, -3, 3);
    return check([&] { return readout(log_softmax(a, 1), d); }, {a});
  });
  add_suite("tensor-core", "shape_ops", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({2, 3}), b = d.tensor({2, 2});
    return check(
        [&] {
          auto c = concat<D>({a, b}, 1);  // [2, 5]
          auto st = stack<D>({select(c, 0), select(c, 1)});
          return readout(reshape(slice_rows(st, 1, 2), {5}), d);
        },
        {a, b});
  });
  add_suite("tensor-core", "pick", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({4, 3});
    std::vector<std::size_t> idx{d.index(3), d.index(3), d.index(3), d.index(3)};
    return check([&] { return readout(pick(a, idx), d); }, {a});
  });
  add_suite("tensor-core", "masked_logsumexp", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({3, 5}, -3, 3);
    std::vector<std::uint8_t> mask(15);
    for (std::size_t r = 0; r < 3; ++r) {
      mask[r * 5 + d.index(5)] = 1;
      for (std::size_t j = 0; j < 5; ++j) mask[r * 5 + j] |= std::uint8_t(d.index(2));
    }
    return check([&] { return readout(masked_logsumexp(a, mask), d); }, {a});
  });
  add_suite("tensor-core", "l2_normalize_rows", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({3, 4}, 0.1, 1.0);
    return check([&] { return readout(l2_normalize_rows(a), d); }, {a});
  });

  // nn-ops
  add_suite("nn-ops", "conv3d", [](std::uint64_t seed) {
    Draw d(seed);
    const std::size_t groups = 1 + d.index(2);
    auto spec = spec_of(2 * groups, 2 * groups, {2, 3, 2}, {d.index(2), 1, d.index(2)}, groups,
                        {1, 1 + d.index(2), 1});
    auto x = d.tensor({1, 2 * groups, 3, 4, 3});
    auto w = d.tensor(spec.weight_shape());
    return check([&] { return readout(conv3d(x, w, spec), d); }, {x, w});
  });
  add_suite("nn-ops", "avg_pool3d", [](std::uint64_t seed) {
    Draw d(seed);
    auto x = d.tensor({1, 2, 2, 4, 5});
    return check([&] { return readout(avg_pool3d<D>(x, {1, 2, 2}), d); }, {x});
  });
  add_suite("nn-ops", "global_avg_pool", [](std::uint64_t seed) {
    Draw d(seed);
    auto x = d.tensor({2, 3, 2, 2, 3});
    return check([&] { return readout(global_avg_pool(x), d); }, {x});
  });
  add_suite("nn-ops", "gru_step", [](std::uint64_t seed) {
    Draw d(seed);
    auto cell = GruCell<D>::init(3, 4, d.rng);
    auto x = d.tensor({2, 3}), h = d.tensor({2, 4});
    auto wrt = params_of(cell, "gru");
    wrt.push_back(x);
    wrt.push_back(h);
    return check([&] { return readout(gru_step(cell, x, h), d); }, wrt);
  });
  add_suite("nn-ops", "gru_sequence", [](std::uint64_t seed) {
    Draw d(seed);
    auto cell = GruCell<D>::init(2, 3, d.rng);
    auto xs = d.tensor({4, 2}), h0 = d.tensor({3});
    auto wrt = params_of(cell, "gru");
    wrt.push_back(xs);
    wrt.push_back(h0);
    return check([&] { return readout(gru_sequence(cell, xs, h0), d); }, wrt);
  });

  // odconv-dma
  add_suite("odconv-dma", "attention_forward", [](std::uint64_t seed) {
    Draw d(seed);
    auto spec = spec_of(4, 3, {3, 3, 3}, {1, 1, 1});
    auto att = AttentionParams<D>::init(spec, 3, 2, d.rng);
    auto x = d.tensor({2, 4, 2, 3, 3});
    NamedParams<D> named;
    att.collect(named, "att");
    std::vector<TD> wrt{x};
    for (auto& [n, p] : named) wrt.push_back(p);
    return check(
        [&] {
          auto a = attention_forward(x, att);
          return add(add(add(readout(a.kernel, d), readout(a.in_channel, d)), add(readout(a.out_channel, d),
                                                                                    readout(a.spatial, d))),
                     readout(a.temporal, d));
        },
        wrt);
  });
  add_suite("odconv-dma", "assemble_dynamic_kernel", [](std::uint64_t seed) {
    Draw d(seed);
    const std::size_t groups = 1 + d.index(2);
    auto spec = spec_of(2 * groups, 2 * groups, {2, 2, 2}, {0, 0, 0}, groups);
    KernelBank<D> bank{d.tensor([&] {
      Shape s{3};
      auto w = spec.weight_shape();
      s.insert(s.end(), w.begin(), w.end());
      return s;
    }())};
    OmniAttention<D> att{d.tensor({2, 3}, 0, 1), d.tensor({2, 2 * groups}, 0, 1), d.tensor({2, 2 * groups}, 0, 1),
                         d.tensor({2, 4}, 0, 1), d.tensor({2, 2}, 0, 1)};
    const std::size_t sample = d.index(2);
    return check([&] { return readout(assemble_dynamic_kernel(bank, att, sample, spec), d); },
                 {bank.base, att.kernel, att.in_channel, att.out_channel, att.spatial, att.temporal});
  });
  add_suite("odconv-dma", "odconv3d_forward", [](std::uint64_t seed) {
    Draw d(seed);
    auto spec = spec_of(2, 3, {3, 3, 3}, {1, 1, 1});
    auto layer = ODConv3d<D>::init(spec, 3, 0.5, true, d.rng);
    auto x = d.tensor({2, 2, 3, 3, 3});
    auto wrt = params_of(layer, "od");
    wrt.push_back(x);
    return check([&] { return readout(odconv3d_forward(x, layer), d); }, wrt);
  });
  add_suite("odconv-dma", "dma_forward", [](std::uint64_t seed) {
    Draw d(seed);
    DmaConfig cfg;
    cfg.d_feat = 6;
    cfg.kernels = 2;
    cfg.reduction = 0.25;
    auto dma = Dma<D>::init(4, cfg, d.rng);
    auto x = d.tensor({1, 4, 3, 3, 3});
    auto wrt = params_of(dma, "dma");
    wrt.push_back(x);
    return check([&] { return readout(dma_forward(x, dma), d); }, wrt);
  });

  // losses
  add_suite("losses", "distill_loss", [](std::uint64_t seed) {
    Draw d(seed);
    auto a = d.tensor({3, 4}), b = d.tensor({3, 4});
    return check([&] { return distill_loss(a, b); }, {a, b});
  });
  add_suite("losses", "cross_entropy", [](std::uint64_t seed) {
    Draw d(seed);
    auto z = d.tensor({4, 3}, -2, 2);
    auto y = d.labels(4, 3);
    return check([&] { return cross_entropy(z, y); }, {z});
  });
  add_suite("losses", "focal_loss", [](std::uint64_t seed) {
    Draw d(seed);
    auto z = d.tensor({4, 3}, -2, 2);
    auto y = d.labels(4, 3);
    const double gamma = std::uniform_real_distribution<double>(0.0, 3.0)(d.rng);
    return check([&] { return focal_loss(z, y, gamma, 0.25); }, {z});
  });
  add_suite("losses", "masked_temporal_loss", [](std::uint64_t seed) {
    Draw d(seed);
    auto z = d.tensor({2, 3, 4}, -2, 2);
    auto y = d.labels(6, 4);
    const auto kind = d.index(2) ? StepLoss::focal : StepLoss::cross_entropy;
    return check([&] { return masked_temporal_loss(z, y, kind); }, {z});
  });
  add_suite("losses", "supcon_loss", [](std::uint64_t seed) {
    Draw d(seed);
    LossWeights w;
    w.temperature = 0.5;
    auto q = d.unit_rows(3, 4, true), kp = d.unit_rows(3, 4, true), bank = d.unit_rows(5, 4, true);
    auto yq = d.labels(3, 3), yb = d.labels(5, 3);
    const auto mode = d.index(2) ? ContrastMode::floating : ContrastMode::standard;
    return check([&] { return supcon_loss(q, yq, kp, bank, yb, w, mode); }, {q, kp, bank});
  });

  // pipeline
  add_suite("pipeline", "teacher_forward", [](std::uint64_t seed) {
    Draw d(seed);
    ModelConfig cfg;
    cfg.classes = 3;
    cfg.d_feat = 4;
    cfg.teacher_widths = {3};
    cfg.backbone_widths = {3};
    cfg.backbone_pool = {true, false};
    cfg.reduction = 0.25;
    auto t = Teacher<D>::init(cfg, d.rng);
    auto flow = d.tensor({1, 2, 2, 4, 4});
    NamedParams<D> named;
    t.collect(named);
    std::vector<TD> wrt{flow};
    for (auto& [n, p] : named) wrt.push_back(p);
    return check(
        [&] {
          auto out = teacher_forward(t, flow);
          return add(readout(out.z, d), readout(out.logits, d));
        },
        wrt);
  });
  add_suite("pipeline", "student_forward", [](std::uint64_t seed) {
    Draw d(seed);
    ModelConfig cfg;
    cfg.classes = 2;
    cfg.d_feat = 4;
    cfg.backbone_widths = {3};
    cfg.backbone_pool = {true, false};
    cfg.teacher_widths = {3};
    cfg.t_clip = 3;
    cfg.gru_hidden = 3;
    cfg.proj_dim = 2;
    cfg.kernels = 2;
    cfg.reduction = 0.25;
    auto s = Student<D>::init(cfg, d.rng);
    auto rgb = d.tensor({1, 3, 3, 4, 4}, 0, 1);
    std::vector<TD> wrt{rgb};
    for (auto& p : s.params({"backbone.", "dma.", "pretrain_head."})) wrt.push_back(p);
    return check(
        [&] {
          auto out = student_forward(s, rgb);
          return add(add(readout(out.fused, d), readout(out.z_motion, d)), readout(out.logits, d));
        },
        wrt);
  });
  add_suite("pipeline", "project", [](std::uint64_t seed) {
    Draw d(seed);
    auto p1 = LinearLayer<D>::init(4, 4, d.rng), p2 = LinearLayer<D>::init(4, 3, d.rng);
    auto h = d.tensor({2, 4});
    auto wrt = params_of(p1, "p1");
    for (auto& p : params_of(p2, "p2")) wrt.push_back(p);
    wrt.push_back(h);
    return check([&] { return readout(project(p1, p2, h), d); }, wrt);
  });
  return s;
}

// y = x^2 whose recorded backward claims dy/dx = x.
TD broken_square(const TD& x) {
  std::vector<D> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return detail::finish<D>(x.shape(), std::move(out), {x}, [x](const std::vector<D>& gy, const std::vector<D>&) {
    if (D* gx = detail::grad_target(x))
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * x[i];
  });
}

}  // namespace

const std::vector<GradSuite>& registered_grad_suites() {
  static const std::vector<GradSuite> suites = build();
  return suites;
}

GradSuite corrupted_backward_fixture() {
  return {"fixture", "corrupted_square", [](std::uint64_t seed) {
            Draw d(seed);
            auto x = d.tensor({4}, 0.5, 2.0);
            return check([&] { return readout(broken_square(x), d); }, {x});
          }};
}

std::vector<GradSuiteResult> run_grad_suites(const std::vector<GradSuite>& suites, const std::string& scope,
                                             std::size_t seeds, double tol) {
  std::set<std::string> modules;
  for (const auto& s : suites) modules.insert(s.module);
  if (scope != "all" && !modules.count(scope)) {
    std::string known = "all";
    for (const auto& m : modules) known += ", " + m;
    throw ContractError("unknown gradcheck scope '" + scope + "' (known: " + known + ")");
  }
  std::vector<GradSuiteResult> out;
  for (const auto& s : suites) {
    if (scope != "all" && s.module != scope) continue;
    GradSuiteResult r{s.module, s.op, seeds, {}, 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t seed = 0; seed < seeds; ++seed) {
      auto rep = s.run(seed);
      rep.pass = rep.pass && rep.max_rel_err <= tol;
      r.report.merge(rep);
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cake
