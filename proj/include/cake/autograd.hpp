// SPDX-License-Identifier: Apache-2.0
//
// Eager, tape-based reverse-mode differentiation.
//
// A GradTape installs itself as the current tape of the calling thread for
// its lifetime. Every operator whose inputs require gradients appends one
// entry while the tape is active. Execution order is a topological order of
// the graph, so replaying the entries backwards visits each node once after
// all of its consumers.

#pragma once

#include <functional>
#include <vector>

#include "cake/tensor.hpp"

namespace cake {

class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// Tape recording on this thread, or nullptr.
  static GradTape* current();

  /// `reset` clears the entry's output gradient before a replay;
  /// `propagate` pushes the output gradient into the inputs.
  void record(std::function<void()> reset, std::function<void()> propagate);

  bool suspended() const { return suspended_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Leaf
  /// gradients accumulate across calls; intermediate gradients are reset.
  template <class T>
  void backward(const BasicTensor<T>& loss);

 private:
  struct Entry {
    std::function<void()> reset;
    std::function<void()> propagate;
  };
  std::vector<Entry> entries_;
  GradTape* previous_ = nullptr;
  bool suspended_ = false;

  friend class NoGradGuard;
};

/// Suspends recording on the current tape for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradTape* tape_;
  bool was_suspended_ = false;
};

/// True when an operator consuming a tensor with requires_grad should record.
bool grad_recording();

/// Backward on the current tape. Throws ContractError when there is no tape or
/// the loss is not a scalar.
template <class T>
void backward(const BasicTensor<T>& loss);

}  // namespace cake
