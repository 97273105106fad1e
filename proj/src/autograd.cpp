// SPDX-License-Identifier: Apache-2.0

#include "cake/autograd.hpp"

namespace cake {

namespace {
thread_local GradTape* current_tape = nullptr;
}  // namespace

GradTape::GradTape() : previous_(current_tape) { current_tape = this; }

GradTape::~GradTape() { current_tape = previous_; }

GradTape* GradTape::current() { return current_tape; }

void GradTape::record(std::function<void()> reset, std::function<void()> propagate) {
  entries_.push_back({std::move(reset), std::move(propagate)});
}

template <class T>
void GradTape::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  // A loss with no path to any parameter leaves every gradient at zero.
  if (!loss.requires_grad()) return;
  for (auto& e : entries_) e.reset();
  BasicTensor<T> seed = loss;
  seed.grad_buffer()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->propagate();
}

template void GradTape::backward(const BasicTensor<float>&);
template void GradTape::backward(const BasicTensor<double>&);

NoGradGuard::NoGradGuard() : tape_(current_tape) {
  if (tape_) {
    was_suspended_ = tape_->suspended_;
    tape_->suspended_ = true;
  }
}

NoGradGuard::~NoGradGuard() {
  if (tape_) tape_->suspended_ = was_suspended_;
}

bool grad_recording() { return current_tape != nullptr && !current_tape->suspended(); }

template <class T>
void backward(const BasicTensor<T>& loss) {
  auto* tape = GradTape::current();
  if (!tape) throw ContractError("backward() called without an active GradTape");
  tape->backward(loss);
}

template void backward(const BasicTensor<float>&);
template void backward(const BasicTensor<double>&);

}  // namespace cake
