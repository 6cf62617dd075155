// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Artifacts of criteria
// 1-5 and 7 are written twice (run1, run2) from identical seeds and compared
// byte for byte for criterion 8.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "flora/bench.hpp"
#include "flora/cli.hpp"
#include "flora/train.hpp"
#include "flora/verify.hpp"

namespace fs = std::filesystem;
using namespace flora;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

void write_json(const fs::path& p, const Json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << j.dump(2) << '\n';
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string failed_names(const VerifyReport& r, std::size_t limit = 5) {
  std::string s;
  std::size_t n = 0;
  for (const auto& c : r.checks) {
    if (c.passed) continue;
    if (n++ < limit) s += (s.empty() ? "" : ", ") + c.suite + "/" + c.name;
  }
  if (n > limit) s += ", ...";
  return s;
}

// ---- 1 ----------------------------------------------------------------------

Outcome c1_params(const fs::path& dir) {
  struct Case {
    const char* shape;
    std::uint64_t expected;
  };
  Outcome o{true, ""};
  for (const Case& c : {Case{"llama1b", 22544384}, Case{"llama3b", 48627712}}) {
    std::ostringstream out, err;
    const int code = run_cli({"params", "--shape", c.shape, "--variant", "lora", "--rank", "32", "--out",
                              (dir / c.shape).string()},
                             out, err);
    ModelConfig m = ModelConfig::preset(c.shape);
    m.adapter = AdapterSpec::preset(Variant::kLora, 32);
    const auto counted = param_count(m).trainable;
    const bool ok = code == 0 && out.str().find(with_thousands(c.expected)) != std::string::npos &&
                    counted == c.expected && closed_form_trainable(m) == c.expected;
    o.pass = o.pass && ok;
    o.detail += std::string(o.detail.empty() ? "" : "; ") + c.shape + " " + with_thousands(counted) + " (" +
                format_millions(counted) + ")";
  }
  return o;
}

// ---- 2 ----------------------------------------------------------------------

Outcome c2_equivalence(const fs::path& dir) {
  EquivalenceOptions opts;
  opts.trials = 100;
  const auto report = equivalence_all(opts);
  write_json(dir / "equivalence.json", report.to_json());
  const std::set<std::string> required = {"layer.pf_lora_vs_lora", "layer.ffa_vs_unfused",
                                          "layer.ffbl_vs_four_products", "layer.fbl_vs_wx_plus_bdx",
                                          "model.logits_vs_parallel_oracle"};
  std::set<std::string> seen;
  double worst = 0.0;
  bool trials_ok = true;
  for (const auto& c : report.checks) {
    if (c.name == "coverage") continue;
    seen.insert(c.name);
    worst = std::max(worst, c.max_rel_error);
    trials_ok = trials_ok && c.tolerance <= 1e-10 && c.dims.value("trials", 0) == 100;
  }
  std::string missing;
  for (const auto& r : required) {
    if (!seen.count(r)) missing += " " + r;
  }
  Outcome o;
  o.pass = report.passed() && missing.empty() && trials_ok;
  o.detail = std::to_string(report.checks.size()) + " checks x 100 trials, worst rel " + fmt("%.2e", worst);
  if (!missing.empty()) o.detail += "; missing:" + missing;
  if (!trials_ok) o.detail += "; a cell ran with the wrong trial count or tolerance";
  if (!report.passed()) o.detail += "; failed: " + failed_names(report);
  return o;
}

// ---- 3 ----------------------------------------------------------------------

Outcome c3_base_preservation(const fs::path& dir) {
  const auto report = base_preservation_suite(20, 1, 1e-12);
  write_json(dir / "base_preservation.json", report.to_json());
  std::set<std::string> variants;
  double worst = 0.0;
  for (const auto& c : report.checks) {
    variants.insert(c.dims.value("variant", ""));
    worst = std::max(worst, c.max_rel_error);
  }
  const bool every = variants.size() + 1 == all_variants().size();  // every variant but none
  Outcome o;
  o.pass = report.passed() && every;
  o.detail = std::to_string(variants.size()) + " variants x 20 prompts, worst rel " + fmt("%.2e", worst);
  if (!report.passed()) o.detail += "; failed: " + failed_names(report);
  return o;
}

// ---- 4 ----------------------------------------------------------------------

Outcome c4_gradients(const fs::path& dir) {
  VerifyReport report;
  for (GradScope s : {GradScope::kPrimitive, GradScope::kLayer, GradScope::kBlock, GradScope::kModel}) {
    report.merge(grad_check_suite(s, {}));
  }
  write_json(dir / "grad_check.json", report.to_json());
  double worst_prim = 0.0, worst_model = 0.0;
  bool tol_ok = true, frozen_seen = false, frozen_ok = true;
  for (const auto& c : report.checks) {
    if (c.name.find("frozen_base") != std::string::npos) {
      frozen_seen = true;
      frozen_ok = frozen_ok && c.passed;
      continue;
    }
    const std::string scope = c.dims.value("scope", "");
    if (scope == "primitive" || scope == "layer") {
      worst_prim = std::max(worst_prim, c.max_rel_error);
      tol_ok = tol_ok && c.tolerance <= 1e-6;
    } else {
      worst_model = std::max(worst_model, c.max_rel_error);
      tol_ok = tol_ok && c.tolerance <= 1e-4;
    }
  }
  Outcome o;
  o.pass = report.passed() && tol_ok && frozen_seen && frozen_ok;
  o.detail = std::to_string(report.checks.size()) + " checks, worst rel primitive " + fmt("%.2e", worst_prim) +
             " / model " + fmt("%.2e", worst_model) + ", base grads " + (frozen_ok ? "absent" : "PRESENT");
  if (!report.passed()) o.detail += "; failed: " + failed_names(report);
  return o;
}

// ---- 5 ----------------------------------------------------------------------

Outcome c5_op_ledger(const fs::path& dir) {
  const ModelConfig shape = ModelConfig::bench();
  Json ledger = Json::object();
  std::vector<std::string> bad;
  auto counts_for = [&](Variant v) {
    ModelConfig m = shape;
    m.adapter = AdapterSpec::preset(v, 32);
    TransformerModel<float> model(m, 1);
    return count_ops(model, 4, 3).step;
  };
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  const Projection all_proj[] = {Projection::kQuery, Projection::kKey,  Projection::kValue, Projection::kOutput,
                                 Projection::kGate,  Projection::kUp,   Projection::kDown};
  for (Variant v : all_variants()) {
    if (v == Variant::kNone) continue;
    const auto step = counts_for(v);
    Json per = Json::object();
    for (std::size_t l = 0; l < shape.n_layers; ++l) {
      for (Projection p : all_proj) {
        const std::string site = projection_site(l, p);
        const OpTally t = step.site(site);
        per[site] = {{"sequential", t.sequential()},
                     {"fused_matmul", t.count(OpKind::kFusedMatmul)},
                     {"concat", t.count(OpKind::kConcat)},
                     {"repeat_add", t.count(OpKind::kRepeatAdd)}};
        const std::string tag = std::string(variant_name(v)) + " " + site;
        switch (v) {
          case Variant::kLora: expect(t.sequential() == 4, tag + " != 4"); break;
          case Variant::kPfLora: expect(t.sequential() == 3, tag + " != 3"); break;
          case Variant::kFfa: expect(t.sequential() == 2, tag + " != 2"); break;
          default:
            if (p == Projection::kOutput || p == Projection::kDown) {
              if (v == Variant::kFfbaAB) break;  // FFBL, not FBL
              expect(t.sequential() == 1 && t.count(OpKind::kFusedMatmul) == 1 && t.count(OpKind::kConcat) == 1,
                     tag + " is not 1 fused matmul + 1 concat");
            }
        }
      }
    }
    ledger[variant_name(v)] = {{"sites", per}, {"repeat_add_total", step.totals().count(OpKind::kRepeatAdd)}};
  }
  const auto aorb_repeat = ledger["ffba_aorb"]["repeat_add_total"].get<std::uint64_t>();
  expect(aorb_repeat == 0, "ffba_aorb records " + std::to_string(aorb_repeat) + " repeat_add");
  write_json(dir / "op_ledger.json", ledger);
  Outcome o;
  o.pass = bad.empty();
  o.detail = "lora 4, pf_lora 3, ffa 2, FBL 1 fused + 1 concat over " + std::to_string(shape.n_layers) +
             " layers x 7 projections; ffba_aorb repeat_add " + std::to_string(aorb_repeat);
  if (!bad.empty()) o.detail += "; mismatches: " + bad.front() + (bad.size() > 1 ? ", ..." : "");
  return o;
}

// ---- 6 ----------------------------------------------------------------------

Outcome c6_latency(const fs::path& dir, std::size_t runs) {
  BenchConfig cfg;
  cfg.variants = {Variant::kNone, Variant::kLora, Variant::kPfLora, Variant::kFfa, Variant::kFfbaAB,
                  Variant::kFfbaAorB};
  struct Gap {
    const char* hi;
    const char* lo;
    std::size_t held = 0;
  };
  Gap gaps[] = {{"lora", "pf_lora"}, {"pf_lora", "ffa"}, {"ffba_ab", "ffba_aorb"}};
  std::string per_run;
  bool pinned = false;
  for (std::size_t r = 0; r < runs; ++r) {
    const auto report = run_bench<float>(cfg);
    pinned = report.environment.pinned;
    emit_report(report, dir / ("run" + std::to_string(r + 1)));
    auto tpot = [&](const std::string& v) {
      for (const auto& row : report.rows) {
        if (row.variant == v) return row.tpot_ms;
      }
      throw ContractError("bench row missing: " + v);
    };
    per_run += "\n      run " + std::to_string(r + 1) + ":";
    for (const auto& row : report.rows) per_run += " " + row.variant + " " + fmt("%.3f", row.tpot_ms);
    for (auto& g : gaps) g.held += tpot(g.hi) >= tpot(g.lo) ? 1 : 0;
  }
  const std::size_t need = runs - 1;
  Outcome o{true, ""};
  for (const auto& g : gaps) {
    o.pass = o.pass && g.held >= need;
    o.detail += std::string(o.detail.empty() ? "" : ", ") + g.hi + ">=" + g.lo + " " + std::to_string(g.held) + "/" +
                std::to_string(runs);
  }
  o.detail += " (need " + std::to_string(need) + "/" + std::to_string(runs) + "; d_model " +
              std::to_string(cfg.model.d_model) + ", r " + std::to_string(cfg.rank) + ", TPOT ms, " +
              (pinned ? "pinned" : "not pinned") + ")" + per_run;
  return o;
}

// ---- 7 ----------------------------------------------------------------------

Outcome c7_protocol(const fs::path& dir) {
  const ProtocolConfig cfg = ProtocolConfig::defaults();
  const auto r = run_protocol<double>(cfg, dir);
  const double acc = r.selected_test.token_accuracy;
  const bool frozen = r.base_hash_before == r.base_hash_after;
  const auto lrs = cfg.sweep.learning_rates();
  // Every learning rate left one checkpoint per epoch on disk.
  std::size_t ckpts = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "sweep")) {
    const auto name = e.path().filename().string();
    if (name.rfind("epoch_", 0) == 0 && e.path().extension() == ".ckpt") ++ckpts;
  }
  std::size_t expected_ckpts = 0;
  for (const auto& run : r.sweep.runs) expected_ckpts += run.epochs.size();
  const bool shaped = lrs.size() == 7 && cfg.sweep.train.schedule == "constant" && ckpts == expected_ckpts &&
                      r.sweep.grid.size() >= lrs.size();
  // Regression check on the lowest learning rate: final epoch loss against
  // the first step (reported, pinned in the train tests).
  const auto& low = r.sweep.runs.front();
  const double first = low.steps.empty() ? 0.0 : low.steps.front().loss;
  const double last = low.epochs.empty() ? 0.0 : low.epochs.back().train_loss;
  Outcome o;
  o.pass = frozen && shaped && acc >= 0.95;
  o.detail = "selected lr " + fmt("%.4g", r.sweep.best_learning_rate) + " epoch " +
             std::to_string(r.sweep.best_epoch) + ", test token acc " + fmt("%.4f", acc) + " (need 0.95), base " +
             (frozen ? "unchanged" : "CHANGED") + ", " + std::to_string(ckpts) + " epoch checkpoints; lr " +
             fmt("%.0e", lrs.front()) + " loss " + fmt("%.3f", first) + " -> " + fmt("%.3f", last);
  if (!shaped) o.detail += "; protocol shape check failed";
  return o;
}

// ---- 8 ----------------------------------------------------------------------

std::vector<std::string> diff_trees(const fs::path& a, const fs::path& b) {
  std::vector<std::string> diffs;
  std::set<std::string> files;
  for (const auto* root : {&a, &b}) {
    for (const auto& e : fs::recursive_directory_iterator(*root)) {
      if (e.is_regular_file()) files.insert(fs::relative(e.path(), *root).string());
    }
  }
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  for (const auto& f : files) {
    if (!fs::exists(a / f) || !fs::exists(b / f) || slurp(a / f) != slurp(b / f)) diffs.push_back(f);
  }
  return diffs;
}

using Timed = std::function<Outcome(const fs::path&)>;

struct Criterion {
  int id;
  const char* title;
  double limit_s;
  Timed run;
};

// limit <= 0: no runtime bound.
int print_line(int id, const char* title, const Outcome& o, double secs, double limit) {
  const bool in_time = limit <= 0.0 || secs < limit;
  const bool pass = o.pass && in_time;
  const std::string bound = limit > 0.0 ? fmt(", limit %.0f s", limit) : "";
  std::printf("%s %d %s: %s [%.1f s%s%s]\n", pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), secs,
              bound.c_str(), in_time ? "" : ", OVER LIMIT");
  std::fflush(stdout);
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-8"};
  std::string out = "acceptance_out";
  std::vector<int> only;
  std::size_t latency_runs = 5;
  app.add_option("--out", out, "artifact directory");
  app.add_option("--only", only, "run a subset of criteria")->delimiter(',');
  std::vector<int> allow_fail;
  app.add_option("--allow-fail", allow_fail,
                 "criteria whose FAIL line is still printed but does not set the exit status")
      ->delimiter(',');
  app.add_option("--latency-runs", latency_runs, "independent runs for criterion 6")->check(CLI::Range(2, 100));
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  const fs::path root = fs::absolute(out);
  const fs::path work = root / "work";
  fs::remove_all(root);
  fs::create_directories(root);

  const std::vector<Criterion> reproducible = {
      {1, "parameter reproduction", 1.0, [](const fs::path& d) { return c1_params(d / "c1"); }},
      {2, "fusion equivalence", 120.0, [](const fs::path& d) { return c2_equivalence(d / "c2"); }},
      {3, "base preservation", 60.0, [](const fs::path& d) { return c3_base_preservation(d / "c3"); }},
      {4, "gradient correctness", 300.0, [](const fs::path& d) { return c4_gradients(d / "c4"); }},
      {5, "op-count ledger", 10.0, [](const fs::path& d) { return c5_op_ledger(d / "c5"); }},
      {7, "training protocol", 900.0, [](const fs::path& d) { return c7_protocol(d / "c7"); }},
  };
  auto time_it = [](const std::function<Outcome()>& f, double& secs) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return o;
  };

  int failures = 0, tolerated = 0;
  auto tally = [&](int id, int failed) {
    if (!failed) return;
    if (std::find(allow_fail.begin(), allow_fail.end(), id) != allow_fail.end()) {
      ++tolerated;
    } else {
      ++failures;
    }
  };
  // First pass: criteria 1-5 and 7 in a fixed directory, then set aside.
  std::vector<std::pair<const Criterion*, std::pair<Outcome, double>>> results;
  for (const auto& c : reproducible) {
    if (!wanted(c.id)) continue;
    double secs = 0.0;
    Outcome o = time_it([&] { return c.run(work); }, secs);
    results.push_back({&c, {o, secs}});
    if (c.id != 7) tally(c.id, print_line(c.id, c.title, o, secs, c.limit_s));
  }
  if (wanted(6)) {
    double secs = 0.0;
    Outcome o = time_it([&] { return c6_latency(root / "c6", latency_runs); }, secs);
    tally(6, print_line(6, "latency ordering", o, secs, 600.0));
  }
  for (const auto& [c, r] : results) {
    if (c->id == 7) tally(7, print_line(7, c->title, r.first, r.second, c->limit_s));
  }

  if (wanted(8) && !results.empty()) {
    fs::rename(work, root / "run1");
    std::string ids;
    double secs = 0.0;
    Outcome o = time_it(
        [&] {
          for (const auto& [c, r] : results) {
            c->run(work);
            ids += (ids.empty() ? "" : ",") + std::to_string(c->id);
          }
          fs::rename(work, root / "run2");
          const auto diffs = diff_trees(root / "run1", root / "run2");
          std::size_t files = 0;
          for (const auto& e : fs::recursive_directory_iterator(root / "run1")) files += e.is_regular_file();
          Outcome out{diffs.empty(), "reran criteria " + ids + ": " + std::to_string(files) + " files, " +
                                         std::to_string(diffs.size()) + " differ"};
          if (!diffs.empty()) out.detail += " (first: " + diffs.front() + ")";
          return out;
        },
        secs);
    tally(8, print_line(8, "determinism", o, secs, 0.0));
  }
  std::printf("acceptance: %d criteria failed", failures + tolerated);
  if (tolerated > 0) std::printf(" (%d of them listed in --allow-fail)", tolerated);
  std::printf("\n");
  return failures == 0 ? 0 : 1;
}
