// SPDX-License-Identifier: Apache-2.0

#include "cake/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "cake/parallel.hpp"

namespace cake {

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("percentile rank outside [0, 1]");
  std::sort(values.begin(), values.end());
  const auto rank = std::size_t(std::ceil(q * double(values.size())));
  return values[rank == 0 ? 0 : rank - 1];
}

BenchResult run_bench(const Student<float>& model, const SynthConfig& data, std::size_t total, std::size_t warmup,
                      std::uint64_t seed) {
  if (total < warmup + 100) throw ContractError("bench needs at least warmup + 100 frames");
  BenchResult r;
  r.warmup = warmup;
  r.frames = total - warmup;
  r.threads = num_threads();
  r.height = data.height;
  r.width = data.width;

  StreamState state;
  SyntheticClip clip = synth_generate(seed, data);
  std::size_t offset = 0, clip_index = 0;
  StepTiming sum;
  using Clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < total; ++i) {
    if (i - offset == clip.length()) {
      offset = i;
      clip = synth_generate(seed + ++clip_index, data);
    }
    const Tensor frame = clip.frame(i - offset);
    StepTiming parts;
    const auto t0 = Clock::now();
    stream_step(model, state, frame, &parts);
    const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
    if (i < warmup) continue;
    r.latencies.push_back(dt);
    sum.backbone += parts.backbone;
    sum.dma += parts.dma;
    sum.gru += parts.gru;
    sum.head += parts.head;
  }
  const double n = double(r.frames);
  r.latency_mean = std::accumulate(r.latencies.begin(), r.latencies.end(), 0.0) / n;
  r.fps_mean = 1.0 / r.latency_mean;
  r.latency_p50 = percentile(r.latencies, 0.50);
  r.latency_p95 = percentile(r.latencies, 0.95);
  r.breakdown = {sum.backbone / n, sum.dma / n, sum.gru / n, sum.head / n};
  return r;
}

}  // namespace cake
