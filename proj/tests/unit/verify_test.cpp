// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/verify.hpp"

#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

namespace flora {
namespace {

EquivalenceOptions quick(std::size_t trials = 8) {
  EquivalenceOptions o;
  o.trials = trials;
  o.seed = 11;
  return o;
}

const CheckResult* find(const VerifyReport& r, const std::string& name) {
  for (const auto& c : r.checks) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

TEST(VerifyReport, AnyFailureFailsTheReport) {
  VerifyReport r;
  r.add({"s", "a", true, 0.0, 1e-10, 3, Json::object(), ""});
  EXPECT_TRUE(r.passed());
  r.add({"s", "b", false, 1.0, 1e-10, 4, Json::object(), ""});
  EXPECT_FALSE(r.passed());
  EXPECT_EQ(r.failures(), 1u);
  const Json j = r.to_json();
  EXPECT_EQ(j["status"], "fail");
  EXPECT_EQ(j["checks"][1]["seed"], 4);
  EXPECT_NE(r.summary().find("FAIL s/b"), std::string::npos);
}

TEST(Reference, SingleTokenAttentionIsOutputTimesValue) {
  // With one position softmax is 1 and rotation is the identity.
  ModelConfig cfg = verify_micro_config(Variant::kNone);
  const auto base = BaseWeights<double>::random(cfg, 3);
  std::mt19937_64 rng(5);
  auto x = testing::random_tensor<double>({cfg.d_model, 1}, rng);
  const auto got = reference::attention_block(cfg, base, {}, 0, reference::from_tensor(x));
  // h = x / rms(x) with unit gain.
  double ss = 0.0;
  for (double v : x.data()) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / cfg.d_model + cfg.norm_eps);
  std::vector<double> h(cfg.d_model);
  for (std::size_t i = 0; i < cfg.d_model; ++i) h[i] = x.data()[i] * inv;
  std::vector<double> v(cfg.kv_dim(), 0.0);
  for (std::size_t i = 0; i < cfg.kv_dim(); ++i) {
    for (std::size_t p = 0; p < cfg.d_model; ++p) v[i] += base.layers[0].wv.at(i, p) * h[p];
  }
  // Heads 0 and 1 share kv head 0 (group of two).
  std::vector<double> att(cfg.d_model);
  for (std::size_t i = 0; i < cfg.d_model; ++i) att[i] = v[i % cfg.head_dim()];
  for (std::size_t i = 0; i < cfg.d_model; ++i) {
    double o = 0.0;
    for (std::size_t p = 0; p < cfg.d_model; ++p) o += base.layers[0].wo.at(i, p) * att[p];
    EXPECT_NEAR(got.at(i, 0), o, 1e-14);
  }
}

TEST(Equivalence, EveryVariantPassesAtTightTolerance) {
  for (Variant v : all_variants()) {
    const auto report = equivalence_suite(v, quick());
    EXPECT_TRUE(report.passed()) << variant_name(v) << "\n" << report.summary();
    std::set<std::string> levels;
    for (const auto& c : report.checks) {
      if (c.dims.contains("level")) levels.insert(c.dims["level"].get<std::string>());
      EXPECT_EQ(c.tolerance, c.name == "coverage" ? 0.0 : 1e-10);
    }
    EXPECT_EQ(levels, (std::set<std::string>{"layer", "block", "model"}));
  }
}

TEST(Equivalence, NamedOraclesArePresent) {
  EXPECT_NE(find(equivalence_suite(Variant::kPfLora, quick(2)), "layer.pf_lora_vs_lora"), nullptr);
  EXPECT_NE(find(equivalence_suite(Variant::kFfa, quick(2)), "layer.ffa_vs_unfused"), nullptr);
  const auto ab = equivalence_suite(Variant::kFfbaAB, quick(2));
  EXPECT_NE(find(ab, "layer.ffbl_vs_four_products"), nullptr);
  EXPECT_NE(find(ab, "layer.ffbl_no_c_vs_products"), nullptr);
  EXPECT_NE(find(equivalence_suite(Variant::kFfbaAorB, quick(2)), "layer.fbl_vs_wx_plus_bdx"), nullptr);
  EXPECT_NE(find(ab, "model.logits_vs_parallel_oracle"), nullptr);
}

TEST(Equivalence, AllVariantsCoverEveryCell) {
  const auto report = equivalence_all(quick(2));
  const auto* cov = find(report, "coverage");
  ASSERT_NE(cov, nullptr);
  EXPECT_TRUE(cov->passed) << cov->detail;
  EXPECT_EQ(cov->dims["cells"], 24);
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(Equivalence, CanaryPerturbationFailsEveryLevel) {
  auto o = quick(3);
  o.canary_perturbation = 1e-3;
  for (Variant v : all_variants()) {
    const auto report = equivalence_suite(v, o);
    EXPECT_FALSE(report.passed()) << variant_name(v);
    std::set<std::string> failed_levels;
    for (const auto& c : report.checks) {
      if (!c.passed && c.dims.contains("level")) failed_levels.insert(c.dims["level"].get<std::string>());
    }
    EXPECT_EQ(failed_levels, (std::set<std::string>{"layer", "block", "model"})) << variant_name(v);
  }
}

TEST(Equivalence, DeterministicGivenSeed) {
  const auto a = equivalence_suite(Variant::kFfbaQgAdd, quick(4)).to_json().dump();
  const auto b = equivalence_suite(Variant::kFfbaQgAdd, quick(4)).to_json().dump();
  EXPECT_EQ(a, b);
}

TEST(BasePreservation, ZeroInitAdaptersMatchBaseLogits) {
  const auto report = base_preservation_suite(5, 3);
  EXPECT_TRUE(report.passed()) << report.summary();
  // Every adapted variant, plus the ab C/relu configuration.
  EXPECT_EQ(report.checks.size(), all_variants().size());
}

TEST(GradCheck, PrimitivesPass) {
  const auto report = grad_check_suite(GradScope::kPrimitive, {});
  EXPECT_TRUE(report.passed()) << report.summary();
  EXPECT_NE(find(report, "primitive.repeat_add"), nullptr);
  for (const auto& c : report.checks) EXPECT_EQ(c.tolerance, 1e-6);
}

TEST(GradCheck, LayerBlockAndModelScopesPass) {
  for (GradScope s : {GradScope::kLayer, GradScope::kBlock, GradScope::kModel}) {
    const auto report = grad_check_suite(s, {});
    EXPECT_TRUE(report.passed()) << grad_scope_name(s) << "\n" << report.summary();
  }
}

TEST(GradCheck, ModelScopeAssertsFrozenBase) {
  const Variant v[] = {Variant::kFfbaAorB};
  const auto report = grad_check_suite(GradScope::kModel, {}, v);
  const auto* frozen = find(report, "model.frozen_base");
  ASSERT_NE(frozen, nullptr);
  EXPECT_TRUE(frozen->passed) << frozen->detail;
  EXPECT_NE(find(report, "model.ffba_aorb.loss.relu_stacked"), nullptr);
}

TEST(GradCheck, ScopeNamesRoundTrip) {
  for (GradScope s : {GradScope::kPrimitive, GradScope::kLayer, GradScope::kBlock, GradScope::kModel}) {
    EXPECT_EQ(parse_grad_scope(grad_scope_name(s)), s);
  }
  EXPECT_THROW(parse_grad_scope("everything"), ConfigError);
}

TEST(ParamTable, ReproducesPublishedLoraCounts) {
  const std::vector<std::string> shapes = {"llama1b", "llama3b"};
  const auto rows = param_table(shapes, 32);
  ASSERT_EQ(rows.size(), 2 * all_variants().size());
  for (const auto& r : rows) {
    if (r.variant == Variant::kNone) {
      EXPECT_EQ(r.trainable, 0u);
    }
    if (r.variant != Variant::kLora) continue;
    if (r.shape == "llama1b") {
      EXPECT_EQ(r.trainable, 22544384u);
      EXPECT_EQ(format_millions(r.trainable), "22.5M");
    } else {
      EXPECT_EQ(r.trainable, 48627712u);
      EXPECT_EQ(format_millions(r.trainable), "48.6M");
    }
  }
  const auto md = param_table_markdown(rows);
  EXPECT_NE(md.find("| llama1b | lora | 32 | 22.5M | 22544384 |"), std::string::npos);
  const auto csv = param_table_csv(rows);
  EXPECT_NE(csv.find("llama3b,lora,32,48.6M,48627712,"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(rows.size() + 1));
}

}  // namespace
}  // namespace flora
