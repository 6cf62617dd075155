// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Settings resolve in the order: built-in defaults,
// then the --config file, then FLORA_OUT / FLORA_JOBS, then flags. Every run
// writes the fully resolved configuration to <out>/resolved_config.json.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flora/bench.hpp"
#include "flora/config_json.hpp"
#include "flora/train.hpp"
#include "flora/verify.hpp"

namespace flora {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;       // a verification check or run failed
inline constexpr int kExitConfigError = 2;  // bad flags, config file or environment

struct VerifySettings {
  // Empty: every variant.
  std::vector<Variant> variants;
  // Any of "equivalence", "base_preservation", "grad_check".
  std::vector<std::string> suites = {"equivalence", "base_preservation", "grad_check"};
  std::size_t trials = 100;
  std::size_t prompts = 20;
  std::vector<GradScope> grad_scopes = {GradScope::kPrimitive, GradScope::kLayer, GradScope::kBlock,
                                        GradScope::kModel};
  // Harness self-test: perturbs the fused side of the equivalence cells, so
  // a non-zero value must fail the run.
  double canary = 0.0;
};

// Checkpoint inputs for eval and generate.
struct InferenceSettings {
  std::string base;      // base checkpoint; empty means random base from seed
  std::string adapters;  // adapter checkpoint; empty means none
  std::string split = "test";
  std::vector<int> prompt;
  std::size_t gen_len = 16;
};

struct RunConfig {
  std::string command;
  // The adapter under test lives in model.adapter ("adapter" in JSON).
  ModelConfig model;
  std::uint64_t seed = 1;
  // "f32" or "f64"; empty picks the subcommand default (f32 for bench).
  std::string precision;
  std::string output_dir = "flora_out";
  // Pretraining, target task and sweep; model, adapter and seed come from
  // the top level.
  ProtocolConfig train = ProtocolConfig::defaults();
  BenchConfig bench;
  VerifySettings verify;
  InferenceSettings inference;

  // Toy model with the default protocol adapter (ffba_aorb, rank 8).
  static RunConfig defaults();
  // The protocol with the top-level model, adapter and seed substituted.
  ProtocolConfig protocol() const;
};

Json to_json(const RunConfig& c);
// Strict: unknown keys raise ConfigError naming the key path. Missing keys
// keep the value in `base`.
RunConfig run_config_from_json(const Json& j, RunConfig base = RunConfig::defaults());
// Reads and parses a config file; ConfigError on I/O or syntax errors.
RunConfig load_run_config(const std::string& path, RunConfig base = RunConfig::defaults());

// "12,34" -> {12, 34}; ConfigError on anything else.
std::vector<int> parse_token_list(const std::string& s, const std::string& what);
// 22544384 -> "22,544,384".
std::string with_thousands(std::uint64_t n);

// Entry point; args exclude the program name. Output goes to `out`,
// diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace flora
