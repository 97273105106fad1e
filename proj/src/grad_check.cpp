// SPDX-License-Identifier: Apache-2.0

#include "cake/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "cake/autograd.hpp"

namespace cake {

void GradCheckReport::merge(const GradCheckReport& other) {
  max_rel_err = std::max(max_rel_err, other.max_rel_err);
  pass = pass && other.pass;
  checked += other.checked;
  excluded += other.excluded;
}

namespace {

template <class T>
double eval_scalar(const std::function<BasicTensor<T>()>& f) {
  NoGradGuard no_grad;
  auto y = f();
  if (y.numel() != 1) throw ContractError("grad_check: function is not scalar-valued");
  const double v = static_cast<double>(y.item());
  if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite function value");
  return v;
}

}  // namespace

template <class T>
GradCheckReport grad_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> wrt, double eps,
                           double tol) {
  std::vector<bool> saved;
  for (auto& x : wrt) {
    saved.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }

  std::vector<std::vector<T>> analytic;
  {
    GradTape tape;
    auto y = f();
    if (y.numel() != 1) throw ContractError("grad_check: function is not scalar-valued");
    if (!std::isfinite(static_cast<double>(y.item())))
      throw EvaluationError("grad_check: non-finite function value");
    tape.backward(y);
  }
  for (auto& x : wrt) analytic.push_back(x.grad());

  GradCheckReport report;
  const double f0 = eval_scalar(f);
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    auto data = wrt[t].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T orig = data[i];
      const double a = static_cast<double>(analytic[t][i]);
      // Central difference at step h, plus the one-sided slopes.
      auto probe = [&](double h, double& right, double& left) {
        data[i] = static_cast<T>(orig + h);
        const double fp = eval_scalar(f);
        data[i] = static_cast<T>(orig - h);
        const double fm = eval_scalar(f);
        data[i] = orig;
        right = (fp - f0) / h;
        left = (f0 - fm) / h;
        const double numeric = (fp - fm) / (2.0 * h);
        return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradScaleFloor});
      };
      double right = 0, left = 0;
      double err = probe(eps, right, left);
      // A ReLU kink inside [x - eps, x + eps] bends the difference quotient;
      // a step ten times smaller usually clears it.
      if (err > tol) err = probe(eps / 10, right, left);
      if (err <= tol) {
        report.max_rel_err = std::max(report.max_rel_err, err);
        ++report.checked;
        continue;
      }
      const double jump = std::abs(right - left);
      if (jump > 0.25 * std::max({std::abs(right), std::abs(left), kGradScaleFloor})) {
        ++report.excluded;
        continue;
      }
      report.max_rel_err = std::max(report.max_rel_err, err);
      ++report.checked;
      report.pass = false;
    }
  }

  for (std::size_t t = 0; t < wrt.size(); ++t) {
    wrt[t].set_requires_grad(saved[t]);
    wrt[t].zero_grad();
  }
  return report;
}

template <class T>
GradCheckReport grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                           double eps, double tol) {
  std::function<BasicTensor<T>()> g = [&f, x] { return f(x); };
  return grad_check<T>(g, std::vector<BasicTensor<T>>{x}, eps, tol);
}

template GradCheckReport grad_check(const std::function<BasicTensor<float>()>&, std::vector<BasicTensor<float>>,
                                    double, double);
template GradCheckReport grad_check(const std::function<BasicTensor<double>()>&, std::vector<BasicTensor<double>>,
                                    double, double);
template GradCheckReport grad_check(const std::function<BasicTensor<float>(const BasicTensor<float>&)>&,
                                    BasicTensor<float>, double, double);
template GradCheckReport grad_check(const std::function<BasicTensor<double>(const BasicTensor<double>&)>&,
                                    BasicTensor<double>, double, double);

}  // namespace cake
