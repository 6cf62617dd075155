// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/tape.hpp"

namespace flora {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

void Tape::record(const char* op_name, std::function<void()> backward_step) {
  entries_.push_back({op_name, std::move(backward_step)});
}

void Tape::replay() {
  last_replay_.clear();
  last_replay_.reserve(entries_.size());
  for (std::size_t i = entries_.size(); i-- > 0;) {
    last_replay_.push_back(i);
    entries_[i].step();
  }
}

void Tape::clear() {
  entries_.clear();
  last_replay_.clear();
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace flora
