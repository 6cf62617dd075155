// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/op_counter.hpp"

namespace flora {

namespace {
thread_local OpCounter* g_active_counter = nullptr;

std::size_t idx(OpKind k) { return static_cast<std::size_t>(k); }
std::size_t idx(Attribution a) { return a == Attribution::kBase ? 0 : 1; }
}  // namespace

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::kFusedMatmul: return "fused_matmul";
    case OpKind::kPlainMatmul: return "plain_matmul";
    case OpKind::kSmallMatmul: return "small_matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kRepeatAdd: return "repeat_add";
    case OpKind::kConcat: return "concat";
    case OpKind::kSplit: return "split";
    case OpKind::kActivation: return "activation";
    case OpKind::kNorm: return "norm";
    case OpKind::kAttention: return "attention";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kRope: return "rope";
  }
  return "unknown";
}

bool is_memory_op(OpKind kind) { return kind == OpKind::kConcat || kind == OpKind::kSplit; }

std::uint64_t OpTally::count(OpKind kind) const {
  return counts[idx(kind)][0] + counts[idx(kind)][1];
}

std::uint64_t OpTally::count(OpKind kind, Attribution who) const {
  return counts[idx(kind)][idx(who)];
}

std::uint64_t OpTally::sequential() const {
  return sequential(Attribution::kBase) + sequential(Attribution::kAdapter);
}

std::uint64_t OpTally::sequential(Attribution who) const {
  std::uint64_t n = 0;
  for (std::size_t k = 0; k < kOpKindCount; ++k) {
    if (!is_memory_op(static_cast<OpKind>(k))) n += counts[k][idx(who)];
  }
  return n;
}

std::uint64_t OpTally::total(Attribution who) const {
  std::uint64_t n = 0;
  for (std::size_t k = 0; k < kOpKindCount; ++k) n += counts[k][idx(who)];
  return n;
}

OpTally& OpTally::operator+=(const OpTally& other) {
  for (std::size_t k = 0; k < kOpKindCount; ++k) {
    counts[k][0] += other.counts[k][0];
    counts[k][1] += other.counts[k][1];
  }
  return *this;
}

void OpCounter::record(OpKind kind, Attribution who, std::string_view site) {
  ++totals_.counts[idx(kind)][idx(who)];
  auto it = sites_.find(site);
  if (it == sites_.end()) it = sites_.emplace(std::string(site), OpTally{}).first;
  ++it->second.counts[idx(kind)][idx(who)];
}

OpTally OpCounter::site(std::string_view name) const {
  auto it = sites_.find(name);
  return it == sites_.end() ? OpTally{} : it->second;
}

void OpCounter::reset() {
  totals_ = {};
  sites_.clear();
}

OpCounter* active_op_counter() { return g_active_counter; }

OpCounterScope::OpCounterScope(OpCounter& counter) : previous_(g_active_counter) {
  g_active_counter = &counter;
}

OpCounterScope::~OpCounterScope() { g_active_counter = previous_; }

}  // namespace flora
