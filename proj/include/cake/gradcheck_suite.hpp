// SPDX-License-Identifier: Apache-2.0
//
// Registry of finite-difference suites, one per differentiable operation,
// each run on small random float64 instances drawn from a seed.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cake/grad_check.hpp"

namespace cake {

struct GradSuite {
  std::string module;  // tensor-core, nn-ops, odconv-dma, losses, pipeline
  std::string op;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

struct GradSuiteResult {
  std::string module;
  std::string op;
  std::size_t seeds = 0;
  GradCheckReport report;  // merged over seeds
  double seconds = 0.0;
};

const std::vector<GradSuite>& registered_grad_suites();

/// A suite whose backward is deliberately wrong (d(x^2)/dx computed as x),
/// for exercising failure reporting.
GradSuite corrupted_backward_fixture();

/// Runs every suite whose module equals `scope` ("all" runs everything) over
/// seeds 0..seeds-1. Throws ContractError for an unknown scope.
std::vector<GradSuiteResult> run_grad_suites(const std::vector<GradSuite>& suites, const std::string& scope,
                                             std::size_t seeds, double tol = 1e-4);

}  // namespace cake
