// SPDX-License-Identifier: Apache-2.0
//
// Streaming latency harness: times stream_step frame by frame on a monotonic
// clock, after a warmup.

#pragma once

#include <cstdint>
#include <vector>

#include "cake/data.hpp"
#include "cake/models.hpp"
#include "cake/stream.hpp"

namespace cake {

struct BenchResult {
  std::size_t frames = 0;   // timed frames
  std::size_t warmup = 0;
  std::size_t threads = 1;
  std::size_t height = 0, width = 0;
  double fps_mean = 0.0;    // 1 / mean latency
  double latency_mean = 0.0, latency_p50 = 0.0, latency_p95 = 0.0;  // seconds
  StepTiming breakdown;     // mean seconds per frame and component
  std::vector<double> latencies;
};

/// Nearest-rank percentile, q in [0, 1].
double percentile(std::vector<double> values, double q);

/// Streams `total` frames of synthetic video (clips generated from `seed`,
/// concatenated as needed) and times every step after the first `warmup`.
/// Throws ContractError unless total >= warmup + 100.
BenchResult run_bench(const Student<float>& model, const SynthConfig& data, std::size_t total, std::size_t warmup,
                      std::uint64_t seed);

}  // namespace cake
