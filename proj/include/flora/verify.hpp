// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Verification suites: fused-vs-oracle equivalence, finite-difference
// gradient checks and the parameter table. Every check is a report entry;
// nothing here throws on a failed comparison.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flora/config_json.hpp"
#include "flora/model.hpp"

namespace flora {

struct CheckResult {
  std::string suite;  // "equivalence", "base_preservation", "grad_check", ...
  std::string name;
  bool passed = false;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::uint64_t seed = 0;
  Json dims = Json::object();
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  void add(CheckResult c) { checks.push_back(std::move(c)); }
  void merge(const VerifyReport& other);
  bool passed() const;
  std::size_t failures() const;
  Json to_json() const;
  // One line per check plus a verdict line.
  std::string summary() const;
};

// Independent 64-bit reference written with plain loops and the unfused
// adapter algebra (W x + B A x, tiled repeat-and-add, W x + B delta, ...).
namespace reference {

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

Matrix from_tensor(const Tensor<double>& t);

// Residual branches of layer `layer` for one causal sequence at positions
// 0..L-1; x is d_model x L.
Matrix attention_block(const ModelConfig& cfg, const BaseWeights<double>& base,
                       const AdapterTensors<double>& adapters, std::size_t layer, const Matrix& x);
Matrix ffn_block(const ModelConfig& cfg, const BaseWeights<double>& base,
                 const AdapterTensors<double>& adapters, std::size_t layer, const Matrix& x);
// Logits (vocab x L) of one causal sequence.
Matrix logits(const ModelConfig& cfg, const BaseWeights<double>& base,
              const AdapterTensors<double>& adapters, std::span<const int> tokens);

}  // namespace reference

struct EquivalenceOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 1;
  double tolerance = 1e-10;
  // Added to one base weight on the fused side only; a non-zero value must
  // make the suite fail (harness self-test).
  double canary_perturbation = 0.0;
  // Layer-level dimensions.
  std::size_t d_in = 32, d_out = 48, rank = 4, tokens = 5;
};

// Layer, block and full-model cells for one variant, all at 64-bit.
VerifyReport equivalence_suite(Variant variant, const EquivalenceOptions& opts);
// Every variant plus a coverage check that no variant x level cell is missing.
VerifyReport equivalence_all(const EquivalenceOptions& opts);

// Full-model logits with zero-initialized adapters against the adapter-free
// model, for every variant.
VerifyReport base_preservation_suite(std::size_t prompts, std::uint64_t seed,
                                     double tolerance = 1e-12);

enum class GradScope { kPrimitive, kLayer, kBlock, kModel };
const char* grad_scope_name(GradScope s);
GradScope parse_grad_scope(const std::string& name);

struct GradCheckOptions {
  std::uint64_t seed = 1;
  double step = 1e-5;        // relative central-difference step
  double primitive_tol = 1e-6;
  double model_tol = 1e-4;   // block and model scope
  // Model scope also checks the full toy geometry (rank 8) on a seeded
  // sample of 12 entries per adapter tensor.
  bool toy_model = true;
};

// Finite differences against the tape for every trainable tensor in scope,
// plus a check that frozen base weights never receive a gradient.
VerifyReport grad_check_suite(GradScope scope, const GradCheckOptions& opts,
                              std::span<const Variant> variants = {});

struct ParamRow {
  std::string shape;
  Variant variant = Variant::kNone;
  std::size_t rank = 0;
  std::uint64_t trainable = 0;
  std::uint64_t total = 0;
};

// The "22.5M"-style rendering: millions with one decimal.
std::string format_millions(std::uint64_t n);
// shape presets x variants at the given rank.
std::vector<ParamRow> param_table(std::span<const std::string> shapes, std::size_t rank);
std::string param_table_markdown(const std::vector<ParamRow>& rows);
std::string param_table_csv(const std::vector<ParamRow>& rows);

// Micro geometry used by the block, model and gradient cells.
ModelConfig verify_micro_config(Variant variant, std::size_t rank = 2);
// Fresh adapters for `cfg` with every partition (including B and C) drawn
// uniformly from [-scale, scale].
AdapterTensors<double> random_adapters(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5);

}  // namespace flora
