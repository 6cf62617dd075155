// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Semantic op ledger. Layer and block code report each kernel-level
// invocation (a matmul, an add, a repeat-and-add, ...) under a category, an
// attribution (base model vs adapter) and a site name such as
// "layers.0.attn.q". Counting is off unless an OpCounterScope is active.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>

namespace flora {

enum class OpKind {
  kFusedMatmul,   // one matmul over a weight with adapter partitions stacked in
  kPlainMatmul,   // matmul over a base-sized weight (or attention/output head)
  kSmallMatmul,   // adapter-only matmul (A x, B dy)
  kAdd,           // elementwise add of two same-shaped tensors
  kRepeatAdd,     // repeat-and-add / shrink
  kConcat,        // memory op: stacking inputs
  kSplit,         // memory op: viewing rows of a stacked output
  kActivation,    // relu / silu / gating product
  kNorm,
  kAttention,
  kEmbedding,
  kRope,
};

inline constexpr std::size_t kOpKindCount = 12;

enum class Attribution { kBase, kAdapter };

const char* op_kind_name(OpKind kind);
// Memory ops move data without arithmetic and are reported separately from
// sequential compute ops.
bool is_memory_op(OpKind kind);

struct OpTally {
  std::array<std::array<std::uint64_t, 2>, kOpKindCount> counts{};

  std::uint64_t count(OpKind kind) const;
  std::uint64_t count(OpKind kind, Attribution who) const;
  // Non-memory ops.
  std::uint64_t sequential() const;
  std::uint64_t sequential(Attribution who) const;
  std::uint64_t total(Attribution who) const;

  OpTally& operator+=(const OpTally& other);
  bool operator==(const OpTally& other) const = default;
};

class OpCounter {
 public:
  void record(OpKind kind, Attribution who, std::string_view site);

  const OpTally& totals() const { return totals_; }
  const std::map<std::string, OpTally, std::less<>>& sites() const { return sites_; }
  // Empty tally for sites that recorded nothing.
  OpTally site(std::string_view name) const;
  void reset();

  bool operator==(const OpCounter& other) const = default;

 private:
  OpTally totals_;
  std::map<std::string, OpTally, std::less<>> sites_;
};

OpCounter* active_op_counter();

class OpCounterScope {
 public:
  explicit OpCounterScope(OpCounter& counter);
  ~OpCounterScope();
  OpCounterScope(const OpCounterScope&) = delete;
  OpCounterScope& operator=(const OpCounterScope&) = delete;

 private:
  OpCounter* previous_;
};

inline void count_op(OpKind kind, Attribution who, std::string_view site) {
  if (OpCounter* c = active_op_counter()) c->record(kind, who, site);
}

}  // namespace flora
