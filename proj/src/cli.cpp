// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "flora/checkpoint.hpp"

namespace flora {

namespace {

const char* const kSuites[] = {"equivalence", "base_preservation", "grad_check"};

// Keys of a nested section that are owned by the top level.
void reject_keys(const Json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) return;
  for (const char* k : keys) {
    if (j.contains(k)) throw ConfigError(path + "." + k + ": set at the top level of the config");
  }
}

// Section defaults overlaid with the user's keys; "replace" keys are taken
// whole rather than merged (a model section is a preset plus overrides).
Json overlay(Json defaults, const Json& user, std::initializer_list<const char*> replace) {
  if (!user.is_object()) return user;  // let the strict reader report it
  for (const char* k : replace) {
    if (user.contains(k)) defaults.erase(k);
  }
  for (auto it = user.begin(); it != user.end(); ++it) {
    auto& slot = defaults[it.key()];
    if (slot.is_object() && it.value().is_object() &&
        std::find_if(replace.begin(), replace.end(), [&](const char* r) { return it.key() == r; }) ==
            replace.end()) {
      slot = overlay(slot, it.value(), {});
    } else {
      slot = it.value();
    }
  }
  return defaults;
}

Json train_section(const ProtocolConfig& p) {
  Json j = to_json(p);
  j.erase("model");
  j.erase("adapter");
  j.erase("seed");
  return j;
}

Json bench_section(const BenchConfig& b) {
  Json j = to_json(b);
  j.erase("seed");
  return j;
}

std::vector<std::string> string_array(const Json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_string()) throw ConfigError(path + "[" + std::to_string(i) + "]: expected a string");
    out.push_back(j[i].get<std::string>());
  }
  return out;
}

std::vector<Variant> variants_from(const std::vector<std::string>& names, const std::string& path) {
  std::vector<Variant> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    try {
      out.push_back(parse_variant(names[i]));
    } catch (const ConfigError& e) {
      throw ConfigError(path + "[" + std::to_string(i) + "]: " + e.what());
    }
  }
  return out;
}

Json to_json(const VerifySettings& v) {
  Json variants = Json::array(), scopes = Json::array();
  for (Variant x : v.variants) variants.push_back(variant_name(x));
  for (GradScope s : v.grad_scopes) scopes.push_back(grad_scope_name(s));
  return Json{{"variants", variants}, {"suites", v.suites},          {"trials", v.trials},
              {"prompts", v.prompts},   {"grad_scopes", scopes},     {"canary", v.canary}};
}

VerifySettings verify_from_json(const Json& j, VerifySettings v, const std::string& path) {
  StrictObject o(j, path);
  if (const Json* x = o.child("variants")) {
    v.variants = variants_from(string_array(*x, o.key_path("variants")), o.key_path("variants"));
  }
  if (const Json* x = o.child("suites")) {
    v.suites = string_array(*x, o.key_path("suites"));
    for (std::size_t i = 0; i < v.suites.size(); ++i) {
      if (std::find(std::begin(kSuites), std::end(kSuites), v.suites[i]) == std::end(kSuites)) {
        throw ConfigError(o.key_path("suites") + "[" + std::to_string(i) + "]: unknown suite '" +
                          v.suites[i] + "'");
      }
    }
  }
  o.read("trials", v.trials);
  o.read("prompts", v.prompts);
  if (const Json* x = o.child("grad_scopes")) {
    const auto names = string_array(*x, o.key_path("grad_scopes"));
    v.grad_scopes.clear();
    for (std::size_t i = 0; i < names.size(); ++i) {
      try {
        v.grad_scopes.push_back(parse_grad_scope(names[i]));
      } catch (const ConfigError& e) {
        throw ConfigError(o.key_path("grad_scopes") + "[" + std::to_string(i) + "]: " + e.what());
      }
    }
  }
  o.read("canary", v.canary);
  o.finish();
  if (!(v.canary >= 0.0)) throw ConfigError(o.key_path("canary") + " must be non-negative");
  if (v.trials == 0) throw ConfigError(o.key_path("trials") + " must be positive");
  return v;
}

Json to_json(const InferenceSettings& s) {
  return Json{{"base", s.base},     {"adapters", s.adapters}, {"split", s.split},
              {"prompt", s.prompt}, {"gen_len", s.gen_len}};
}

InferenceSettings inference_from_json(const Json& j, InferenceSettings s, const std::string& path) {
  StrictObject o(j, path);
  o.read("base", s.base);
  o.read("adapters", s.adapters);
  o.read("split", s.split);
  if (const Json* p = o.child("prompt")) {
    if (!p->is_array()) throw ConfigError(o.key_path("prompt") + ": expected an array");
    s.prompt.clear();
    for (std::size_t i = 0; i < p->size(); ++i) {
      if (!(*p)[i].is_number_integer()) {
        throw ConfigError(o.key_path("prompt") + "[" + std::to_string(i) + "]: expected an integer");
      }
      s.prompt.push_back((*p)[i].get<int>());
    }
  }
  o.read("gen_len", s.gen_len);
  o.finish();
  if (s.split != "validation" && s.split != "test") {
    throw ConfigError(o.key_path("split") + ": expected 'validation' or 'test'");
  }
  return s;
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model = c.train.model;
  c.seed = c.train.seed;
  return c;
}

ProtocolConfig RunConfig::protocol() const {
  ProtocolConfig p = train;
  p.model = model;
  p.seed = seed;
  return p;
}

Json to_json(const RunConfig& c) {
  Json bench = bench_section(c.bench);
  return Json{{"command", c.command},
              {"seed", c.seed},
              {"precision", c.precision},
              {"output_dir", c.output_dir},
              {"model", to_json(c.model)},
              {"adapter", to_json(c.model.adapter)},
              {"train", train_section(c.train)},
              {"bench", bench},
              {"verify", to_json(c.verify)},
              {"inference", to_json(c.inference)}};
}

RunConfig run_config_from_json(const Json& j, RunConfig c) {
  StrictObject o(j, "");
  o.read("command", c.command);
  o.read("seed", c.seed);
  o.read("precision", c.precision);
  if (!c.precision.empty() && c.precision != "f32" && c.precision != "f64") {
    throw ConfigError("precision: expected 'f32' or 'f64'");
  }
  o.read("output_dir", c.output_dir);
  if (const Json* m = o.child("model")) {
    const AdapterSpec keep = c.model.adapter;
    c.model = model_config_from_json(*m, "model");
    c.model.adapter = keep;
  }
  if (const Json* a = o.child("adapter")) c.model.adapter = adapter_spec_from_json(*a, "adapter");
  if (const Json* t = o.child("train")) {
    reject_keys(*t, "train", {"model", "adapter", "seed"});
    c.train = protocol_config_from_json(overlay(train_section(c.train), *t, {}), "train");
  }
  if (const Json* b = o.child("bench")) {
    reject_keys(*b, "bench", {"seed"});
    c.bench = bench_config_from_json(overlay(bench_section(c.bench), *b, {"model"}), "bench");
  }
  if (const Json* v = o.child("verify")) c.verify = verify_from_json(*v, c.verify, "verify");
  if (const Json* i = o.child("inference")) c.inference = inference_from_json(*i, c.inference, "inference");
  o.finish();
  try {
    c.model.validate();
    c.model.adapter.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config: cannot open '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("--config: '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

std::vector<int> parse_token_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int v = 0;
    const auto* end = item.data() + item.size();
    const auto [ptr, ec] = std::from_chars(item.data(), end, v);
    if (item.empty() || ec != std::errc{} || ptr != end || v < 0) {
      throw ConfigError(what + ": '" + item + "' is not a token id");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(what + ": empty token list");
  return out;
}

std::string with_thousands(std::uint64_t n) {
  std::string digits = std::to_string(n), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

namespace {

// Flag values; presence is read back from the parsed subcommand.
struct Flags {
  std::string config, variant, out, precision = "f64";
  std::size_t rank = 0;
  std::uint64_t seed = 1;
  // verify
  std::vector<std::string> suites, scopes;
  std::size_t trials = 0, prompts = 0;
  // params and bench
  std::vector<std::string> shapes;
  // train and sweep
  double lr = 0.0, lr_min = 0.0, lr_max = 0.0;
  std::size_t epochs = 0, n_lrs = 0, jobs = 0;
  // eval and generate
  std::string base, adapters, split, prompt;
  // bench and generate
  std::size_t prompt_len = 0, gen_len = 0, repeats = 0;
  bool ops_only = false;
};

// Options absent from a subcommand count as not given.
bool given(const CLI::App& sub, const std::string& name) {
  const CLI::Option* o = sub.get_option_no_throw(name);
  return o != nullptr && o->count() > 0;
}

std::size_t env_count(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return 0;
  std::size_t n = 0;
  const char* end = v + std::char_traits<char>::length(v);
  const auto [ptr, ec] = std::from_chars(v, end, n);
  if (ec != std::errc{} || ptr != end || n == 0) {
    throw ConfigError(std::string(name) + ": expected a positive integer, got '" + v + "'");
  }
  return n;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::filesystem::path prepare_out(const RunConfig& c) {
  const std::filesystem::path dir = c.output_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("output_dir: cannot create '" + c.output_dir + "': " + ec.message());
  write_text(dir / "resolved_config.json", to_json(c).dump(2) + "\n");
  return dir;
}

RunConfig resolve(const std::string& cmd, const CLI::App& sub, const Flags& f) {
  RunConfig c = given(sub, "--config") ? load_run_config(f.config) : RunConfig::defaults();
  c.command = cmd;
  if (const char* v = std::getenv("FLORA_OUT"); v != nullptr && *v != '\0') c.output_dir = v;
  if (const std::size_t jobs = env_count("FLORA_JOBS")) c.train.sweep.jobs = jobs;
  if (given(sub, "--out")) c.output_dir = f.out;
  if (given(sub, "--seed")) c.seed = f.seed;
  if (given(sub, "--precision")) c.precision = f.precision;
  if (c.precision.empty()) c.precision = cmd == "bench" ? "f32" : "f64";

  std::optional<Variant> variant;
  if (given(sub, "--variant")) {
    try {
      variant = parse_variant(f.variant);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("--variant: ") + e.what());
    }
  }
  const bool rank_flag = given(sub, "--rank");

  if (cmd == "verify") {
    if (variant) c.verify.variants = {*variant};
    if (given(sub, "--suite")) c.verify.suites = f.suites;
    if (given(sub, "--scope")) {
      c.verify.grad_scopes.clear();
      for (const auto& s : f.scopes) c.verify.grad_scopes.push_back(parse_grad_scope(s));
    }
    if (given(sub, "--trials")) c.verify.trials = f.trials;
    if (given(sub, "--prompts")) c.verify.prompts = f.prompts;
    if (c.precision != "f64") throw ConfigError("precision: the verify suites run in f64");
  } else if (cmd == "bench") {
    if (variant) {
      c.bench.variants = {Variant::kNone};
      if (*variant != Variant::kNone) c.bench.variants.push_back(*variant);
    }
    if (rank_flag) c.bench.rank = f.rank;
    if (given(sub, "--shape")) c.bench.model = ModelConfig::preset(f.shapes.front());
    if (given(sub, "--prompt-len")) c.bench.latency.prompt_len = f.prompt_len;
    if (given(sub, "--gen-len")) c.bench.latency.gen_len = f.gen_len;
    if (given(sub, "--repeats")) c.bench.latency.repeats = f.repeats;
    if (given(sub, "--ops-only")) c.bench.ops_only = f.ops_only;
    c.bench.seed = c.seed;
    c.bench.latency.validate();
    for (Variant v : c.bench.variants) {
      ModelConfig m = c.bench.model;
      m.adapter = AdapterSpec::preset(v, v == Variant::kNone ? 0 : c.bench.rank);
      try {
        m.validate();
        m.adapter.validate();
      } catch (const std::exception& e) {
        throw ConfigError(std::string("bench.rank: ") + variant_name(v) + ": " + e.what());
      }
    }
  } else if (cmd != "params") {
    if (variant) {
      const std::size_t rank = rank_flag ? f.rank : std::max<std::size_t>(c.model.adapter.rank, 8);
      c.model.adapter = AdapterSpec::preset(*variant, *variant == Variant::kNone ? 0 : rank);
    } else if (rank_flag) {
      c.model.adapter.rank = f.rank;
    }
    c.model.adapter.validate();
    if (given(sub, "--lr")) c.train.sweep.train.learning_rate = f.lr;
    if (given(sub, "--epochs")) c.train.sweep.train.epochs = f.epochs;
    if (given(sub, "--lr-min")) c.train.sweep.lr_min = f.lr_min;
    if (given(sub, "--lr-max")) c.train.sweep.lr_max = f.lr_max;
    if (given(sub, "--n-lrs")) c.train.sweep.n_lrs = f.n_lrs;
    if (given(sub, "--jobs")) c.train.sweep.jobs = f.jobs;
    c.train.sweep.train.validate();
    c.train.sweep.learning_rates();
    if (given(sub, "--base")) c.inference.base = f.base;
    if (given(sub, "--adapters")) c.inference.adapters = f.adapters;
    if (given(sub, "--split")) c.inference.split = f.split;
    if (given(sub, "--prompt")) c.inference.prompt = parse_token_list(f.prompt, "--prompt");
    if (given(sub, "--gen-len")) c.inference.gen_len = f.gen_len;
  }
  return c;
}

// ---- verify ---------------------------------------------------------------

int cmd_verify(const RunConfig& c, std::ostream& out) {
  const auto dir = prepare_out(c);
  const auto& v = c.verify;
  const bool all = v.variants.empty();
  auto selected = [&](const std::string& name) {
    return all || std::any_of(v.variants.begin(), v.variants.end(),
                              [&](Variant x) { return name == variant_name(x); });
  };
  VerifyReport report;
  for (const auto& suite : v.suites) {
    if (suite == "equivalence") {
      EquivalenceOptions o;
      o.trials = v.trials;
      o.seed = c.seed;
      o.canary_perturbation = v.canary;
      if (all) {
        report.merge(equivalence_all(o));
      } else {
        for (Variant x : v.variants) report.merge(equivalence_suite(x, o));
      }
    } else if (suite == "base_preservation") {
      for (auto& check : base_preservation_suite(v.prompts, c.seed).checks) {
        if (selected(check.dims.value("variant", ""))) report.add(std::move(check));
      }
    } else if (suite == "grad_check") {
      GradCheckOptions o;
      o.seed = c.seed;
      for (GradScope s : v.grad_scopes) report.merge(grad_check_suite(s, o, v.variants));
    } else {
      throw ConfigError("verify.suites: unknown suite '" + suite + "'");
    }
  }
  write_text(dir / "verify_report.json", report.to_json().dump(2) + "\n");
  out << report.summary();
  return report.passed() ? kExitOk : kExitFailed;
}

// ---- params ---------------------------------------------------------------

int cmd_params(const RunConfig& c, const CLI::App& sub, const Flags& f, std::ostream& out) {
  const std::vector<std::string> shapes =
      given(sub, "--shape") ? f.shapes : std::vector<std::string>{"llama1b", "llama3b"};
  const std::size_t rank = given(sub, "--rank") ? f.rank : 32;
  std::optional<Variant> variant;
  if (given(sub, "--variant")) variant = parse_variant(f.variant);
  std::vector<ParamRow> rows;
  for (auto& r : param_table(shapes, rank)) {
    if (!variant || r.variant == *variant) rows.push_back(std::move(r));
  }
  RunConfig resolved = c;
  resolved.model = ModelConfig::preset(shapes.front());
  resolved.model.adapter = AdapterSpec::preset(variant.value_or(Variant::kLora), rank);
  const auto dir = prepare_out(resolved);
  write_text(dir / "params.csv", param_table_csv(rows));
  write_text(dir / "params.md", param_table_markdown(rows));
  if (rows.size() == 1) {
    const auto& r = rows.front();
    out << with_thousands(r.trainable) << " trainable parameters (" << format_millions(r.trainable)
        << ") for " << variant_name(r.variant) << " r=" << r.rank << " on " << r.shape << "\n";
  } else {
    out << param_table_markdown(rows);
  }
  return kExitOk;
}

// ---- train and sweep ------------------------------------------------------

template <typename T>
int report_protocol(const ProtocolResult<T>& r, std::ostream& out) {
  out << std::setprecision(6);
  out << "pretrain final loss  " << (r.pretrain_log.empty() ? 0.0 : r.pretrain_log.back().loss) << "\n"
      << "initial test acc     " << r.initial_test.token_accuracy << "\n"
      << "selected lr / epoch  " << r.sweep.best_learning_rate << " / " << r.sweep.best_epoch << "\n"
      << "validation acc       " << r.sweep.best_validation.token_accuracy << "\n"
      << "selected test acc    " << r.selected_test.token_accuracy << "\n"
      << "test exact match     " << r.selected_test.exact_match << "\n";
  const bool frozen = r.base_hash_before == r.base_hash_after;
  out << "base weights         " << (frozen ? "unchanged" : "CHANGED") << "\n";
  return frozen ? kExitOk : kExitFailed;
}

template <typename T>
int cmd_protocol(const RunConfig& c, bool single_lr, std::ostream& out) {
  const auto dir = prepare_out(c);
  ProtocolConfig p = c.protocol();
  if (single_lr) {
    p.sweep.lr_min = p.sweep.lr_max = p.sweep.train.learning_rate;
    p.sweep.n_lrs = 1;
  }
  return report_protocol(run_protocol<T>(p, dir), out);
}

// ---- eval and generate ----------------------------------------------------

template <typename T>
TransformerModel<T> load_model(const RunConfig& c) {
  const auto& in = c.inference;
  ModelConfig cfg = c.model;
  BaseWeights<T> base;
  if (!in.base.empty()) {
    const auto ckpt = load_checkpoint<T>(in.base);
    cfg = ckpt.config;
    base = base_from_checkpoint(ckpt);
  } else {
    cfg.adapter = AdapterSpec{};
    base = BaseWeights<T>::random(cfg, c.seed);
  }
  cfg.adapter = AdapterSpec{};
  AdapterTensors<T> adapters;
  if (!in.adapters.empty()) {
    const auto ckpt = load_checkpoint<T>(in.adapters);
    ModelConfig dims = ckpt.config;
    dims.adapter = AdapterSpec{};
    if (!(dims == cfg)) {
      throw ConfigError("inference.adapters: '" + in.adapters + "' was trained on a different model shape");
    }
    cfg.adapter = ckpt.config.adapter;
    adapters = adapters_from_checkpoint(ckpt);
  }
  return TransformerModel<T>(cfg, std::move(base), std::move(adapters));
}

template <typename T>
int cmd_eval(const RunConfig& c, std::ostream& out) {
  if (c.inference.base.empty()) throw ConfigError("inference.base: eval needs a base checkpoint (--base)");
  const auto dir = prepare_out(c);
  const auto model = load_model<T>(c);
  const TaskSplits splits = make_splits(c.train.task);
  const auto& split = c.inference.split == "test" ? splits.test : splits.validation;
  const Metrics m = evaluate(model, split, c.train.sweep.train.batch_tokens);
  Json j{{"split", c.inference.split},
         {"variant", variant_name(model.config().adapter.variant)},
         {"metrics", to_json(m)},
         {"base_hash", model.base().hash()}};
  write_text(dir / "eval.json", j.dump(2) + "\n");
  out << std::setprecision(6) << c.inference.split << " token accuracy " << m.token_accuracy
      << ", exact match " << m.exact_match << ", loss " << m.mean_loss << " (" << m.examples
      << " examples)\n";
  return kExitOk;
}

template <typename T>
int cmd_generate(const RunConfig& c, std::ostream& out) {
  const auto& in = c.inference;
  if (in.prompt.empty()) throw ConfigError("inference.prompt: generate needs a prompt (--prompt)");
  const auto model = load_model<T>(c);
  const auto& cfg = model.config();
  for (int t : in.prompt) {
    if (static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw ConfigError("inference.prompt: token " + std::to_string(t) + " is outside the vocabulary");
    }
  }
  if (in.prompt.size() + in.gen_len > cfg.max_seq_len) {
    throw ConfigError("inference.gen_len: prompt plus generation exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  const auto dir = prepare_out(c);
  const auto tokens = model.generate(in.prompt, in.gen_len);
  write_text(dir / "generate.json", Json{{"prompt", in.prompt}, {"tokens", tokens}}.dump(2) + "\n");
  for (std::size_t i = 0; i < tokens.size(); ++i) out << (i ? "," : "") << tokens[i];
  out << "\n";
  return kExitOk;
}

// ---- bench ----------------------------------------------------------------

template <typename T>
int cmd_bench(const RunConfig& c, std::ostream& out) {
  const auto dir = prepare_out(c);
  const auto report = run_bench<T>(c.bench);
  emit_report(report, dir);
  out << bench_markdown(report);
  for (const auto& r : report.rows) {
    if (r.latency.unreliable) out << "warning: " << r.variant << " timing is near the timer resolution\n";
  }
  return kExitOk;
}

template <typename T>
int dispatch(const std::string& cmd, const RunConfig& c, std::ostream& out) {
  if (cmd == "train") return cmd_protocol<T>(c, true, out);
  if (cmd == "sweep") return cmd_protocol<T>(c, false, out);
  if (cmd == "eval") return cmd_eval<T>(c, out);
  if (cmd == "generate") return cmd_generate<T>(c, out);
  return cmd_bench<T>(c, out);
}

void add_common(CLI::App* sub, Flags& f, bool with_rank) {
  sub->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("--variant", f.variant, "adapter variant (none, lora, pf_lora, ffa, ffba_ab, ...)");
  if (with_rank) sub->add_option("--rank", f.rank, "adapter rank");
  sub->add_option("--seed", f.seed, "seed for weights and data");
  sub->add_option("--out", f.out, "output directory (default $FLORA_OUT or flora_out)");
  sub->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fused forward-backward adapters: verification, training and benchmarks", "flora"};
  app.require_subcommand(1);
  Flags f;

  auto* verify = app.add_subcommand("verify", "run the equivalence, base-preservation and gradient suites");
  add_common(verify, f, false);
  verify->add_option("--suite", f.suites, "suites to run (default all)")
      ->check(CLI::IsMember({"equivalence", "base_preservation", "grad_check"}));
  verify->add_option("--scope", f.scopes, "gradient scopes (default all)")
      ->check(CLI::IsMember({"primitive", "layer", "block", "model"}));
  verify->add_option("--trials", f.trials, "random trials per equivalence cell")->check(CLI::PositiveNumber);
  verify->add_option("--prompts", f.prompts, "base-preservation prompts");

  auto* params = app.add_subcommand("params", "trainable parameter counts for shape presets");
  add_common(params, f, true);
  params->add_option("--shape", f.shapes, "shape presets (default llama1b llama3b)");

  auto* train = app.add_subcommand("train", "pretrain a base, then train adapters at one learning rate");
  auto* sweep = app.add_subcommand("sweep", "pretrain a base, then sweep adapter learning rates");
  for (auto* sub : {train, sweep}) {
    add_common(sub, f, true);
    sub->add_option("--epochs", f.epochs, "adapter epochs")->check(CLI::PositiveNumber);
  }
  train->add_option("--lr", f.lr, "adapter learning rate")->check(CLI::PositiveNumber);
  sweep->add_option("--lr-min", f.lr_min, "smallest learning rate")->check(CLI::PositiveNumber);
  sweep->add_option("--lr-max", f.lr_max, "largest learning rate")->check(CLI::PositiveNumber);
  sweep->add_option("--n-lrs", f.n_lrs, "log-spaced learning rates")->check(CLI::PositiveNumber);
  sweep->add_option("--jobs", f.jobs, "parallel learning rates (default $FLORA_JOBS or 1)")
      ->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "score checkpoints on the task split");
  auto* generate = app.add_subcommand("generate", "greedy continuation of a prompt");
  for (auto* sub : {eval, generate}) {
    add_common(sub, f, true);
    sub->add_option("--base", f.base, "base checkpoint");
    sub->add_option("--adapters", f.adapters, "adapter checkpoint");
  }
  eval->add_option("--split", f.split, "validation or test")->check(CLI::IsMember({"validation", "test"}));
  generate->add_option("--prompt", f.prompt, "comma-separated token ids");
  generate->add_option("--gen-len", f.gen_len, "tokens to generate");

  auto* bench = app.add_subcommand("bench", "decode latency and op counts per variant");
  add_common(bench, f, true);
  bench->add_option("--shape", f.shapes, "model preset (default bench)")->expected(1);
  bench->add_option("--prompt-len", f.prompt_len, "prompt tokens")->check(CLI::PositiveNumber);
  bench->add_option("--gen-len", f.gen_len, "generated tokens");
  bench->add_option("--repeats", f.repeats, "timed repeats");
  bench->add_flag("--ops-only", f.ops_only, "count ops without timing");

  std::vector<const char*> argv{"flora"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    if (app.get_subcommands().empty()) err << app.help();
    return kExitConfigError;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  try {
    if (cmd == "params") return cmd_params(resolve(cmd, *sub, f), *sub, f, out);
    const RunConfig c = resolve(cmd, *sub, f);
    if (cmd == "verify") return cmd_verify(c, out);
    return c.precision == "f32" ? dispatch<float>(cmd, c, out) : dispatch<double>(cmd, c, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const DivergenceError& e) {
    err << "run failed: " << e.what() << "\n";
    return kExitFailed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailed;
  }
}

}  // namespace flora
