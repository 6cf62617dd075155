// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation tape.
//
// Ops executed while a Tape is installed (see TapeScope) append a backward
// step whenever one of their inputs is tracked. Tape::backward replays the
// steps in exact reverse order of execution.

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "flora/tensor.hpp"

namespace flora {

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op_name, std::function<void()> backward_step);

  std::size_t size() const { return entries_.size(); }
  const char* op_name(std::size_t index) const { return entries_.at(index).op_name; }

  // Populates gradients of every tracked tensor the loss depends on.
  template <typename T>
  void backward(const Tensor<T>& loss);

  // Entry indices visited by the last backward(), in visiting order.
  const std::vector<std::size_t>& last_replay() const { return last_replay_; }

  // Drops all recorded steps and the intermediates they keep alive.
  void clear();

 private:
  void replay();

  struct Entry {
    const char* op_name;
    std::function<void()> step;
  };
  std::vector<Entry> entries_;
  std::vector<std::size_t> last_replay_;
};

// The tape ops record onto, or nullptr when gradients are not being recorded.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (e.g. for finite-difference probes inside a scope).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

template <typename T>
void Tape::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.tracked()) {
    throw ContractError("backward(): loss is not reachable from any tracked tensor");
  }
  loss.node()->grad_accumulator()[0] += T(1);
  replay();
}

}  // namespace flora
