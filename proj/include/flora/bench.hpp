// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decode latency and op-count benchmarking. Every timed forward pass runs
// twice on identical state and only the second pass is timed; the KV cache is
// truncated back between the two passes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flora/config_json.hpp"
#include "flora/model.hpp"
#include "flora/op_counter.hpp"

namespace flora {

struct LatencyOptions {
  std::size_t prompt_len = 32;
  std::size_t gen_len = 32;
  std::size_t repeats = 5;  // >= 3
  std::size_t warmup = 1;   // untimed full generations before the repeats
  std::uint64_t seed = 1;   // prompt tokens

  void validate() const;
};

struct LatencyStats {
  // Medians over repeats of the timed prefill and of the per-repeat median
  // decode step.
  double ttft_ms = 0.0;
  double tpot_ms = 0.0;
  double ttft_min_ms = 0.0, ttft_max_ms = 0.0;
  double tpot_min_ms = 0.0, tpot_max_ms = 0.0;
  std::vector<double> ttft_per_repeat_ms;
  std::vector<double> tpot_per_repeat_ms;
  double timer_resolution_ms = 0.0;
  // Timer resolution coarser than 1% of a reported value.
  bool unreliable = false;
};

// Smallest observable steady_clock increment, in milliseconds.
double timer_resolution_ms();

// Random prompt of `len` tokens drawn from the model vocabulary.
std::vector<int> bench_prompt(std::size_t vocab_size, std::size_t len, std::uint64_t seed);

template <typename T>
LatencyStats measure_latency(const TransformerModel<T>& model, const LatencyOptions& opts);

struct DecodeOpCounts {
  OpCounter step;     // one decode step (identical for every step)
  OpCounter prefill;  // the whole prompt
};

// Exact counts for prefilling prompt_len tokens and then decoding gen_len
// more; throws ContractError if two decode steps record different counts.
template <typename T>
DecodeOpCounts count_ops(const TransformerModel<T>& model, std::size_t prompt_len, std::size_t gen_len);

struct BenchRow {
  std::string variant;
  std::uint64_t params_trainable = 0;
  double ttft_ms = 0.0;
  double tpot_ms = 0.0;
  double pct_increase = 0.0;  // filled by finalize_rows()
  OpTally ops;                // whole model, one decode step
  LatencyStats latency;
};

struct BenchEnvironment {
  std::string host;
  std::string precision = "f32";
  std::size_t d_model = 0;
  std::size_t rank = 0;
  std::size_t repeats = 0;
  std::size_t prompt_len = 0;
  std::size_t gen_len = 0;
  std::uint64_t seed = 0;
  bool pinned = false;  // process affinity restricted to one CPU
  std::size_t hardware_threads = 0;
  double timer_resolution_ms = 0.0;
  std::string compiler;
};

struct BenchReport {
  BenchEnvironment environment;
  std::vector<BenchRow> rows;
};

BenchEnvironment capture_environment();

// 100 (tpot - tpot_base) / tpot_base for every row; throws ContractError
// without a "none" row.
void finalize_rows(std::vector<BenchRow>& rows);

struct BenchConfig {
  ModelConfig model = ModelConfig::bench();
  std::vector<Variant> variants = {Variant::kNone,    Variant::kLora,    Variant::kPfLora,
                                   Variant::kFfa,     Variant::kFfbaAB,  Variant::kFfbaAorB,
                                   Variant::kFfbaQgAdd, Variant::kFpa};
  std::size_t rank = 32;
  LatencyOptions latency;
  std::uint64_t seed = 1;  // base and adapter weights
  // Skip timing; only op counts and parameter counts.
  bool ops_only = false;
};

// Same base weights for every variant; adapters are given random non-zero
// values so no path is trivially skipped. Within a repeat the variants run in
// lockstep, one decode step each in turn, so drift hits all rows alike.
template <typename T>
BenchReport run_bench(const BenchConfig& cfg);

Json to_json(const BenchReport& report);
std::string bench_csv(const BenchReport& report);
std::string bench_markdown(const BenchReport& report);
// Writes bench.csv, bench.json and bench.md under dir.
void emit_report(const BenchReport& report, const std::filesystem::path& dir);

Json to_json(const LatencyOptions& o);
LatencyOptions latency_options_from_json(const Json& j, const std::string& path);
Json to_json(const BenchConfig& c);
BenchConfig bench_config_from_json(const Json& j, const std::string& path = "bench");

}  // namespace flora
