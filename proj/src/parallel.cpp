// SPDX-License-Identifier: Apache-2.0

#include "cake/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace cake {

namespace {
std::atomic<std::size_t> worker_count{1};
constexpr std::size_t kMinWorkPerThread = 1 << 16;
}  // namespace

void set_num_threads(std::size_t n) { worker_count = std::max<std::size_t>(1, n); }

std::size_t num_threads() { return worker_count; }

void parallel_for(std::size_t count, std::size_t work_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  std::size_t workers = std::min(worker_count.load(), count);
  if (workers > 1) workers = std::min(workers, std::max<std::size_t>(1, count * work_per_item / kMinWorkPerThread));
  if (workers <= 1) {
    body(0, count);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(count, b + chunk);
    if (b < e) pool.emplace_back([&body, b, e] { body(b, e); });
  }
  body(0, std::min(count, chunk));
}

}  // namespace cake
