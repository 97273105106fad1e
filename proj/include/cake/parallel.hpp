// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace cake {

/// Worker count used by operators that split independent outputs across
/// threads. Defaults to 1.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Runs body(begin, end) over contiguous chunks of [0, count). Each index is
/// owned by exactly one chunk, so per-element summation order never depends
/// on the thread count. `work_per_item` gates threading for small loops.
void parallel_for(std::size_t count, std::size_t work_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace cake
