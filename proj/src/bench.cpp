// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/bench.hpp"

#include <sched.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

namespace flora {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct RepeatTiming {
  double ttft_ms = 0.0;
  double tpot_ms = 0.0;  // median over decoded tokens
};

// One greedy generation with double-pass timing.
template <typename T>
RepeatTiming timed_generation(const TransformerModel<T>& model, std::span<const int> prompt,
                              std::size_t gen_len) {
  RepeatTiming out;
  auto cache = model.make_cache();
  model.prefill(prompt, cache);
  cache.truncate(0);
  auto t0 = Clock::now();
  Tensor<T> logits = model.prefill(prompt, cache);
  auto t1 = Clock::now();
  out.ttft_ms = ms_since(t0, t1);
  int next = static_cast<int>(argmax_column(logits, logits.cols() - 1));

  std::vector<double> steps;
  steps.reserve(gen_len);
  for (std::size_t i = 1; i < gen_len; ++i) {
    const std::size_t len = cache.length;
    model.decode_step(next, cache);
    cache.truncate(len);
    t0 = Clock::now();
    logits = model.decode_step(next, cache);
    t1 = Clock::now();
    steps.push_back(ms_since(t0, t1));
    next = static_cast<int>(argmax_column(logits, 0));
  }
  out.tpot_ms = median(std::move(steps));
  return out;
}

// One greedy generation per model, advanced in lockstep: prefill every model,
// then decode step i of every model before step i + 1 of any. Host drift then
// lands on all models alike.
template <typename T>
std::vector<RepeatTiming> interleaved_generation(const std::vector<TransformerModel<T>>& models,
                                                 std::span<const int> prompt, std::size_t gen_len) {
  const std::size_t n = models.size();
  std::vector<RepeatTiming> out(n);
  std::vector<KVCache<T>> caches;
  std::vector<int> next(n);
  std::vector<std::vector<double>> steps(n);
  for (std::size_t i = 0; i < n; ++i) {
    caches.push_back(models[i].make_cache());
    models[i].prefill(prompt, caches[i]);
    caches[i].truncate(0);
    const auto t0 = Clock::now();
    const Tensor<T> logits = models[i].prefill(prompt, caches[i]);
    const auto t1 = Clock::now();
    out[i].ttft_ms = ms_since(t0, t1);
    next[i] = static_cast<int>(argmax_column(logits, logits.cols() - 1));
  }
  for (std::size_t s = 1; s < gen_len; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      auto& cache = caches[i];
      const std::size_t len = cache.length;
      models[i].decode_step(next[i], cache);
      cache.truncate(len);
      const auto t0 = Clock::now();
      const Tensor<T> logits = models[i].decode_step(next[i], cache);
      const auto t1 = Clock::now();
      steps[i].push_back(ms_since(t0, t1));
      next[i] = static_cast<int>(argmax_column(logits, 0));
    }
  }
  for (std::size_t i = 0; i < n; ++i) out[i].tpot_ms = median(std::move(steps[i]));
  return out;
}

LatencyStats summarize(const std::vector<RepeatTiming>& reps, double resolution) {
  LatencyStats s;
  for (const auto& r : reps) {
    s.ttft_per_repeat_ms.push_back(r.ttft_ms);
    s.tpot_per_repeat_ms.push_back(r.tpot_ms);
  }
  s.ttft_ms = median(s.ttft_per_repeat_ms);
  s.tpot_ms = median(s.tpot_per_repeat_ms);
  auto [tmin, tmax] = std::minmax_element(s.ttft_per_repeat_ms.begin(), s.ttft_per_repeat_ms.end());
  auto [pmin, pmax] = std::minmax_element(s.tpot_per_repeat_ms.begin(), s.tpot_per_repeat_ms.end());
  s.ttft_min_ms = *tmin;
  s.ttft_max_ms = *tmax;
  s.tpot_min_ms = *pmin;
  s.tpot_max_ms = *pmax;
  s.timer_resolution_ms = resolution;
  s.unreliable = resolution > 0.01 * s.tpot_ms || resolution > 0.01 * s.ttft_ms;
  return s;
}

template <typename T>
TransformerModel<T> bench_model(const TransformerModel<T>& base, Variant v, std::size_t rank,
                                std::uint64_t seed) {
  if (v == Variant::kNone) return base.with_adapters(AdapterSpec{}, seed);
  const AdapterSpec spec = AdapterSpec::preset(v, rank);
  ModelConfig cfg = base.config();
  cfg.adapter = spec;
  std::mt19937_64 rng(seed ^ (0x1000193ULL * (static_cast<std::uint64_t>(v) + 1)));
  std::uniform_real_distribution<double> dist(-0.05, 0.05);
  AdapterTensors<T> adapters;
  for (auto& [name, t] : init_adapters<T>(cfg, seed)) {
    std::vector<T> vals(t.numel());
    for (auto& x : vals) x = static_cast<T>(dist(rng));
    adapters.emplace(name, Tensor<T>::from_vector(t.shape(), std::move(vals)));
  }
  return base.with_adapter_tensors(spec, std::move(adapters));
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void LatencyOptions::validate() const {
  if (repeats < 3) throw ConfigError("bench.latency.repeats must be at least 3");
  if (prompt_len == 0) throw ConfigError("bench.latency.prompt_len must be positive");
  if (gen_len < 2) throw ConfigError("bench.latency.gen_len must be at least 2");
}

double timer_resolution_ms() {
  double best = INFINITY;
  for (int i = 0; i < 200; ++i) {
    const auto t0 = Clock::now();
    auto t1 = Clock::now();
    while (t1 == t0) t1 = Clock::now();
    best = std::min(best, ms_since(t0, t1));
  }
  return best;
}

std::vector<int> bench_prompt(std::size_t vocab_size, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(0, static_cast<int>(vocab_size) - 1);
  std::vector<int> out(len);
  for (auto& t : out) t = dist(rng);
  return out;
}

template <typename T>
LatencyStats measure_latency(const TransformerModel<T>& model, const LatencyOptions& opts) {
  opts.validate();
  if (opts.prompt_len + opts.gen_len > model.config().max_seq_len) {
    throw ConfigError("bench: prompt_len + gen_len exceeds max_seq_len " +
                      std::to_string(model.config().max_seq_len));
  }
  const auto prompt = bench_prompt(model.config().vocab_size, opts.prompt_len, opts.seed);
  for (std::size_t i = 0; i < opts.warmup; ++i) timed_generation(model, prompt, opts.gen_len);
  std::vector<RepeatTiming> reps;
  for (std::size_t r = 0; r < opts.repeats; ++r) reps.push_back(timed_generation(model, prompt, opts.gen_len));
  return summarize(reps, timer_resolution_ms());
}

template <typename T>
DecodeOpCounts count_ops(const TransformerModel<T>& model, std::size_t prompt_len, std::size_t gen_len) {
  if (prompt_len == 0 || gen_len == 0) throw ConfigError("count_ops: prompt_len and gen_len must be positive");
  if (prompt_len + gen_len > model.config().max_seq_len) {
    throw ConfigError("count_ops: prompt_len + gen_len exceeds max_seq_len");
  }
  const auto prompt = bench_prompt(model.config().vocab_size, prompt_len, 1);
  DecodeOpCounts out;
  auto cache = model.make_cache();
  Tensor<T> logits;
  {
    OpCounterScope scope(out.prefill);
    logits = model.prefill(prompt, cache);
  }
  int next = static_cast<int>(argmax_column(logits, logits.cols() - 1));
  for (std::size_t i = 0; i < gen_len; ++i) {
    OpCounter step;
    {
      OpCounterScope scope(step);
      logits = model.decode_step(next, cache);
    }
    if (i == 0) {
      out.step = step;
    } else if (!(step == out.step)) {
      throw ContractError("count_ops: decode step " + std::to_string(i) + " recorded different counts");
    }
    next = static_cast<int>(argmax_column(logits, 0));
  }
  return out;
}

BenchEnvironment capture_environment() {
  BenchEnvironment env;
  char host[256] = {0};
  if (gethostname(host, sizeof host - 1) == 0) env.host = host;
  struct utsname u;
  if (uname(&u) == 0) env.host += std::string(" (") + u.sysname + " " + u.release + " " + u.machine + ")";
  cpu_set_t set;
  CPU_ZERO(&set);
  if (sched_getaffinity(0, sizeof set, &set) == 0) env.pinned = CPU_COUNT(&set) == 1;
  env.hardware_threads = std::thread::hardware_concurrency();
  env.timer_resolution_ms = timer_resolution_ms();
#if defined(__clang__)
  env.compiler = "clang " __clang_version__;
#elif defined(__GNUC__)
  env.compiler = "gcc " __VERSION__;
#endif
  return env;
}

void finalize_rows(std::vector<BenchRow>& rows) {
  auto base = std::find_if(rows.begin(), rows.end(), [](const BenchRow& r) { return r.variant == "none"; });
  if (base == rows.end()) throw ContractError("bench report: no base (variant none) row to compare against");
  const double b = base->tpot_ms;
  for (auto& r : rows) r.pct_increase = b > 0.0 ? 100.0 * (r.tpot_ms - b) / b : 0.0;
}

template <typename T>
BenchReport run_bench(const BenchConfig& cfg) {
  if (!cfg.ops_only) cfg.latency.validate();
  ModelConfig base_cfg = cfg.model;
  base_cfg.adapter = AdapterSpec{};
  const TransformerModel<T> base(base_cfg, cfg.seed);
  std::vector<TransformerModel<T>> models;
  BenchReport report;
  for (Variant v : cfg.variants) {
    models.push_back(bench_model(base, v, cfg.rank, cfg.seed));
    BenchRow row;
    row.variant = variant_name(v);
    row.params_trainable = param_count(models.back().config()).trainable;
    row.ops = count_ops(models.back(), cfg.latency.prompt_len, cfg.latency.gen_len).step.totals();
    report.rows.push_back(std::move(row));
  }
  auto& env = report.environment;
  env = capture_environment();
  env.precision = precision_name(precision_of<T>());
  env.d_model = cfg.model.d_model;
  env.rank = cfg.rank;
  env.repeats = cfg.ops_only ? 0 : cfg.latency.repeats;
  env.prompt_len = cfg.latency.prompt_len;
  env.gen_len = cfg.latency.gen_len;
  env.seed = cfg.seed;
  if (!cfg.ops_only) {
    const auto& lo = cfg.latency;
    const auto prompt = bench_prompt(cfg.model.vocab_size, lo.prompt_len, lo.seed);
    for (std::size_t w = 0; w < lo.warmup; ++w) {
      for (const auto& m : models) timed_generation(m, prompt, lo.gen_len);
    }
    std::vector<std::vector<RepeatTiming>> reps(models.size());
    for (std::size_t r = 0; r < lo.repeats; ++r) {
      const auto round = interleaved_generation(models, prompt, lo.gen_len);
      for (std::size_t i = 0; i < models.size(); ++i) reps[i].push_back(round[i]);
    }
    for (std::size_t i = 0; i < models.size(); ++i) {
      auto& row = report.rows[i];
      row.latency = summarize(reps[i], env.timer_resolution_ms);
      row.ttft_ms = row.latency.ttft_ms;
      row.tpot_ms = row.latency.tpot_ms;
    }
  }
  if (std::any_of(report.rows.begin(), report.rows.end(), [](const BenchRow& r) { return r.variant == "none"; })) {
    finalize_rows(report.rows);
  }
  return report;
}

Json to_json(const BenchReport& report) {
  const auto& e = report.environment;
  Json rows = Json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"variant", r.variant},
                    {"params_trainable", r.params_trainable},
                    {"ttft_ms", r.ttft_ms},
                    {"tpot_ms", r.tpot_ms},
                    {"pct_increase", r.pct_increase},
                    {"ops_fused_matmul", r.ops.count(OpKind::kFusedMatmul)},
                    {"ops_small_matmul", r.ops.count(OpKind::kSmallMatmul)},
                    {"ops_add", r.ops.count(OpKind::kAdd)},
                    {"ops_repeat_add", r.ops.count(OpKind::kRepeatAdd)},
                    {"ops_concat", r.ops.count(OpKind::kConcat)},
                    {"ops_plain_matmul", r.ops.count(OpKind::kPlainMatmul)},
                    {"ops_adapter_sequential", r.ops.sequential(Attribution::kAdapter)},
                    {"latency",
                     {{"ttft_min_ms", r.latency.ttft_min_ms},
                      {"ttft_max_ms", r.latency.ttft_max_ms},
                      {"tpot_min_ms", r.latency.tpot_min_ms},
                      {"tpot_max_ms", r.latency.tpot_max_ms},
                      {"ttft_per_repeat_ms", r.latency.ttft_per_repeat_ms},
                      {"tpot_per_repeat_ms", r.latency.tpot_per_repeat_ms},
                      {"unreliable", r.latency.unreliable}}}});
  }
  return {{"environment",
           {{"host", e.host},
            {"precision", e.precision},
            {"d_model", e.d_model},
            {"rank", e.rank},
            {"repeats", e.repeats},
            {"prompt_len", e.prompt_len},
            {"gen_len", e.gen_len},
            {"seed", e.seed},
            {"pinned", e.pinned},
            {"hardware_threads", e.hardware_threads},
            {"timer_resolution_ms", e.timer_resolution_ms},
            {"compiler", e.compiler}}},
          {"rows", std::move(rows)}};
}

std::string bench_csv(const BenchReport& report) {
  std::ostringstream os;
  os << "variant,params_trainable,ttft_ms,tpot_ms,pct_increase,ops_fused_matmul,ops_small_matmul,"
        "ops_add,ops_repeat_add,ops_concat\n";
  for (const auto& r : report.rows) {
    os << r.variant << ',' << r.params_trainable << ',' << fmt(r.ttft_ms, 4) << ',' << fmt(r.tpot_ms, 4)
       << ',' << fmt(r.pct_increase, 2) << ',' << r.ops.count(OpKind::kFusedMatmul) << ','
       << r.ops.count(OpKind::kSmallMatmul) << ',' << r.ops.count(OpKind::kAdd) << ','
       << r.ops.count(OpKind::kRepeatAdd) << ',' << r.ops.count(OpKind::kConcat) << '\n';
  }
  return os.str();
}

// Same formatted strings as the CSV so the two round-trip exactly.
std::string bench_markdown(const BenchReport& report) {
  std::ostringstream os;
  os << "| variant | #Param | TTFT (ms) | TPOT (ms) | %↑ | fused mm | small mm | add | repeat_add | concat |\n";
  os << "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  std::istringstream csv(bench_csv(report));
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    os << "| ";
    for (char c : line) {
      if (c == ',') {
        os << " | ";
      } else {
        os << c;
      }
    }
    os << " |\n";
  }
  return os.str();
}

void emit_report(const BenchReport& report, const std::filesystem::path& dir) {
  std::vector<BenchRow> check = report.rows;
  finalize_rows(check);
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + (dir / name).string());
    f << text;
  };
  write("bench.csv", bench_csv(report));
  write("bench.json", to_json(report).dump(2) + "\n");
  write("bench.md", bench_markdown(report));
}

Json to_json(const LatencyOptions& o) {
  return {{"prompt_len", o.prompt_len},
          {"gen_len", o.gen_len},
          {"repeats", o.repeats},
          {"warmup", o.warmup},
          {"seed", o.seed}};
}

LatencyOptions latency_options_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  LatencyOptions l;
  o.read("prompt_len", l.prompt_len);
  o.read("gen_len", l.gen_len);
  o.read("repeats", l.repeats);
  o.read("warmup", l.warmup);
  o.read("seed", l.seed);
  o.finish();
  l.validate();
  return l;
}

Json to_json(const BenchConfig& c) {
  Json variants = Json::array();
  for (Variant v : c.variants) variants.push_back(variant_name(v));
  return {{"model", to_json(c.model)},
          {"variants", std::move(variants)},
          {"rank", c.rank},
          {"latency", to_json(c.latency)},
          {"seed", c.seed},
          {"ops_only", c.ops_only}};
}

BenchConfig bench_config_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  BenchConfig c;
  if (const Json* m = o.child("model")) c.model = model_config_from_json(*m, o.key_path("model"));
  if (const Json* v = o.child("variants")) {
    if (!v->is_array()) throw ConfigError(o.key_path("variants") + " must be an array");
    c.variants.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      const auto& e = (*v)[i];
      const std::string key = o.key_path("variants") + "[" + std::to_string(i) + "]";
      if (!e.is_string()) throw ConfigError(key + " must be a string");
      try {
        c.variants.push_back(parse_variant(e.get<std::string>()));
      } catch (const ConfigError& err) {
        throw ConfigError(key + ": " + err.what());
      }
    }
  }
  o.read("rank", c.rank);
  if (const Json* l = o.child("latency")) c.latency = latency_options_from_json(*l, o.key_path("latency"));
  o.read("seed", c.seed);
  o.read("ops_only", c.ops_only);
  o.finish();
  return c;
}

#define FLORA_INSTANTIATE_BENCH(T)                                                                  \
  template LatencyStats measure_latency(const TransformerModel<T>&, const LatencyOptions&);        \
  template DecodeOpCounts count_ops(const TransformerModel<T>&, std::size_t, std::size_t);         \
  template BenchReport run_bench<T>(const BenchConfig&);

FLORA_INSTANTIATE_BENCH(float)
FLORA_INSTANTIATE_BENCH(double)

}  // namespace flora
