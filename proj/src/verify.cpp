// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "flora/ops.hpp"
#include "flora/tape.hpp"

namespace flora {

// ---------------------------------------------------------------------------
// Report

void VerifyReport::merge(const VerifyReport& other) {
  checks.insert(checks.end(), other.checks.begin(), other.checks.end());
}

bool VerifyReport::passed() const { return failures() == 0; }

std::size_t VerifyReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(checks.begin(), checks.end(), [](const CheckResult& c) { return !c.passed; }));
}

Json VerifyReport::to_json() const {
  Json list = Json::array();
  for (const auto& c : checks) {
    list.push_back({{"suite", c.suite},
                    {"name", c.name},
                    {"status", c.passed ? "pass" : "fail"},
                    {"max_rel_error", c.max_rel_error},
                    {"tolerance", c.tolerance},
                    {"seed", c.seed},
                    {"dims", c.dims},
                    {"detail", c.detail}});
  }
  return {{"status", passed() ? "pass" : "fail"},
          {"n_checks", checks.size()},
          {"n_failed", failures()},
          {"checks", std::move(list)}};
}

std::string VerifyReport::summary() const {
  std::ostringstream os;
  char buf[64];
  for (const auto& c : checks) {
    std::snprintf(buf, sizeof buf, "%.3e", c.max_rel_error);
    os << (c.passed ? "PASS " : "FAIL ") << c.suite << '/' << c.name << "  max_rel=" << buf;
    std::snprintf(buf, sizeof buf, "%.0e", c.tolerance);
    os << " tol=" << buf << " seed=" << c.seed;
    if (!c.detail.empty()) os << "  (" << c.detail << ')';
    os << '\n';
  }
  os << (passed() ? "verify: PASS" : "verify: FAIL") << " (" << checks.size() - failures() << '/'
     << checks.size() << " checks passed)\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Reference model

namespace reference {

Matrix from_tensor(const Tensor<double>& t) {
  const std::size_t r = t.rank() == 1 ? t.numel() : t.rows();
  const std::size_t c = t.rank() == 1 ? 1 : t.cols();
  Matrix m(r, c);
  auto d = t.data();
  std::copy(d.begin(), d.end(), m.v.begin());
  return m;
}

namespace {

Matrix mm(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeError("reference::mm: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a.at(i, p) * b.at(p, j);
      out.at(i, j) = s;
    }
  }
  return out;
}

void add_into(Matrix& y, const Matrix& d) {
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += d.v[i];
}

// Row i of y receives row (i mod rows(d)) of d.
void tile_add(Matrix& y, const Matrix& d) {
  if (y.rows % d.rows != 0) throw ShapeError("reference::tile_add: rows do not tile");
  for (std::size_t i = 0; i < y.rows; ++i) {
    for (std::size_t j = 0; j < y.cols; ++j) y.at(i, j) += d.at(i % d.rows, j);
  }
}

Matrix stack(const std::vector<Matrix>& parts) {
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.rows;
  Matrix out(rows, parts.front().cols);
  std::size_t r0 = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows; ++i) {
      for (std::size_t j = 0; j < p.cols; ++j) out.at(r0 + i, j) = p.at(i, j);
    }
    r0 += p.rows;
  }
  return out;
}

Matrix rmsnorm(const Matrix& x, const Tensor<double>& gain, double eps) {
  auto g = gain.data();
  Matrix out(x.rows, x.cols);
  for (std::size_t j = 0; j < x.cols; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) ss += x.at(i, j) * x.at(i, j);
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.rows) + eps);
    for (std::size_t i = 0; i < x.rows; ++i) out.at(i, j) = x.at(i, j) * inv * g[i];
  }
  return out;
}

// Column j sits at position j; pairs (i, i + half) of each head rotate.
Matrix rope(const Matrix& x, std::size_t head_dim, double theta) {
  Matrix out = x;
  const std::size_t half = head_dim / 2;
  for (std::size_t h0 = 0; h0 < x.rows; h0 += head_dim) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      for (std::size_t j = 0; j < x.cols; ++j) {
        const double angle = static_cast<double>(j) * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = x.at(h0 + i, j), b = x.at(h0 + i + half, j);
        out.at(h0 + i, j) = a * c - b * s;
        out.at(h0 + i + half, j) = a * s + b * c;
      }
    }
  }
  return out;
}

// Causal grouped-query attention over one sequence.
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, const ModelConfig& cfg) {
  const std::size_t hd = cfg.head_dim();
  const std::size_t group = cfg.n_heads / cfg.n_kv_heads;
  const std::size_t L = q.cols;
  Matrix out(q.rows, L);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> w(L);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t qo = h * hd, ko = (h / group) * hd;
    for (std::size_t j = 0; j < L; ++j) {
      double mx = -INFINITY;
      for (std::size_t t = 0; t <= j; ++t) {
        double s = 0.0;
        for (std::size_t i = 0; i < hd; ++i) s += q.at(qo + i, j) * k.at(ko + i, t);
        w[t] = s * scale;
        mx = std::max(mx, w[t]);
      }
      double z = 0.0;
      for (std::size_t t = 0; t <= j; ++t) z += (w[t] = std::exp(w[t] - mx));
      for (std::size_t i = 0; i < hd; ++i) {
        double acc = 0.0;
        for (std::size_t t = 0; t <= j; ++t) acc += w[t] / z * v.at(ko + i, t);
        out.at(qo + i, j) = acc;
      }
    }
  }
  return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

std::optional<Matrix> part(const AdapterTensors<double>& adapters, const std::string& site,
                           const char* suffix) {
  auto it = adapters.find(site + suffix);
  if (it == adapters.end()) return std::nullopt;
  return from_tensor(it->second);
}

bool forward_backward(const AdapterSpec& spec) {
  return spec.variant == Variant::kFfbaAB || spec.variant == Variant::kFfbaAorB ||
         spec.variant == Variant::kFfbaQgAdd || spec.variant == Variant::kFpa;
}

struct Branch {
  Matrix y;
  std::optional<Matrix> dy;
};

// Projections carrying their own adapter, and the forward side of the
// forward/backward family.
Branch input_projection(const AdapterSpec& spec, Projection p, const Tensor<double>& w,
                        const AdapterTensors<double>& adapters, const std::string& site,
                        const Matrix& x) {
  Branch out{mm(from_tensor(w), x), std::nullopt};
  switch (spec.variant) {
    case Variant::kNone:
      break;
    case Variant::kLora:
    case Variant::kPfLora:
      add_into(out.y, mm(*part(adapters, site, ".B"), mm(*part(adapters, site, ".A"), x)));
      break;
    case Variant::kFfa:
      tile_add(out.y, mm(*part(adapters, site, ".A"), x));
      break;
    default:
      out.dy = mm(*part(adapters, site, ".A"), x);
      if (spec.add_set.count(p)) tile_add(out.y, *out.dy);
      break;
  }
  return out;
}

Matrix block_delta(const AdapterSpec& spec, const std::vector<Matrix>& dys) {
  Matrix d;
  if (spec.shared_backward) {
    d = dys.front();
    for (std::size_t i = 1; i < dys.size(); ++i) add_into(d, dys[i]);
  } else {
    d = stack(dys);
  }
  if (spec.nonlinearity == Nonlinearity::kRelu) {
    for (auto& e : d.v) e = std::max(e, 0.0);
  }
  return d;
}

Matrix output_projection(const AdapterSpec& spec, Projection p, const Tensor<double>& w,
                         const AdapterTensors<double>& adapters, const std::string& site,
                         const Matrix& x, const std::vector<Branch>& inputs) {
  if (!forward_backward(spec)) return input_projection(spec, p, w, adapters, site, x).y;
  std::vector<Matrix> dys;
  for (const auto& b : inputs) dys.push_back(*b.dy);
  const Matrix delta = block_delta(spec, dys);
  Matrix y = mm(from_tensor(w), x);
  add_into(y, mm(*part(adapters, site, ".B"), delta));
  if (spec.variant == Variant::kFfbaAB) {
    Matrix dy = mm(*part(adapters, site, ".A"), x);
    if (auto c = part(adapters, site, ".C")) add_into(dy, mm(*c, delta));
    tile_add(y, dy);
  }
  return y;
}

}  // namespace

Matrix attention_block(const ModelConfig& cfg, const BaseWeights<double>& base,
                       const AdapterTensors<double>& adapters, std::size_t layer, const Matrix& x) {
  const auto& W = base.layers.at(layer);
  const AdapterSpec spec = cfg.adapter.normalized();
  const Matrix h = rmsnorm(x, W.attn_norm, cfg.norm_eps);
  auto site = [&](Projection p) { return projection_site(layer, p); };
  const Branch q = input_projection(spec, Projection::kQuery, W.wq, adapters, site(Projection::kQuery), h);
  const Branch k = input_projection(spec, Projection::kKey, W.wk, adapters, site(Projection::kKey), h);
  const Branch v = input_projection(spec, Projection::kValue, W.wv, adapters, site(Projection::kValue), h);
  const Matrix att = attention(rope(q.y, cfg.head_dim(), cfg.rope_theta),
                               rope(k.y, cfg.head_dim(), cfg.rope_theta), v.y, cfg);
  return output_projection(spec, Projection::kOutput, W.wo, adapters, site(Projection::kOutput), att,
                           {q, k, v});
}

Matrix ffn_block(const ModelConfig& cfg, const BaseWeights<double>& base,
                 const AdapterTensors<double>& adapters, std::size_t layer, const Matrix& x) {
  const auto& W = base.layers.at(layer);
  const AdapterSpec spec = cfg.adapter.normalized();
  const Matrix h = rmsnorm(x, W.ffn_norm, cfg.norm_eps);
  auto site = [&](Projection p) { return projection_site(layer, p); };
  const Branch g = input_projection(spec, Projection::kGate, W.wgate, adapters, site(Projection::kGate), h);
  const Branch u = input_projection(spec, Projection::kUp, W.wup, adapters, site(Projection::kUp), h);
  Matrix act(g.y.rows, g.y.cols);
  for (std::size_t i = 0; i < act.v.size(); ++i) act.v[i] = silu(g.y.v[i]) * u.y.v[i];
  return output_projection(spec, Projection::kDown, W.wdown, adapters, site(Projection::kDown), act,
                           {g, u});
}

Matrix logits(const ModelConfig& cfg, const BaseWeights<double>& base,
              const AdapterTensors<double>& adapters, std::span<const int> tokens) {
  const Matrix embed = from_tensor(base.embed);
  const std::size_t d = cfg.d_model, L = tokens.size();
  Matrix x(d, L);
  for (std::size_t j = 0; j < L; ++j) {
    for (std::size_t i = 0; i < d; ++i) x.at(i, j) = embed.at(static_cast<std::size_t>(tokens[j]), i);
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    add_into(x, attention_block(cfg, base, adapters, l, x));
    add_into(x, ffn_block(cfg, base, adapters, l, x));
  }
  const Matrix h = rmsnorm(x, base.final_norm, cfg.norm_eps);
  return mm(embed, h);
}

}  // namespace reference

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

using reference::Matrix;

// splitmix64 finalizer over (seed, trial, salt).
std::uint64_t trial_seed(std::uint64_t seed, std::size_t trial, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(trial) + 1) + (salt << 32);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                       bool trainable = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(element_count(shape));
  for (auto& e : v) e = dist(rng);
  auto t = Tensor<double>::from_vector(std::move(shape), std::move(v));
  t.set_requires_grad(trainable);
  return t;
}

double rel_error(std::span<const double> actual, std::span<const double> expected) {
  if (actual.size() != expected.size()) return INFINITY;
  return max_relative_error(actual, expected);
}

double rel_error(const Tensor<double>& actual, const Matrix& expected) {
  return rel_error(actual.data(), std::span<const double>(expected.v));
}

// Accumulates the worst trial of one named comparison.
struct Cell {
  CheckResult result;
  bool any = false;

  Cell(std::string suite, std::string name, double tol, std::uint64_t seed, Json dims) {
    result.suite = std::move(suite);
    result.name = std::move(name);
    result.tolerance = tol;
    result.seed = seed;
    result.dims = std::move(dims);
  }

  void observe(double err, std::size_t trial) {
    // NaN counts as the worst possible outcome.
    const double e = std::isnan(err) ? INFINITY : err;
    if (!any || e > result.max_rel_error) {
      result.max_rel_error = e;
      result.detail = "worst trial " + std::to_string(trial);
    }
    any = true;
  }

  CheckResult finish(std::size_t trials) {
    result.passed = any && result.max_rel_error <= result.tolerance;
    result.dims["trials"] = trials;
    if (!any) result.detail = "no trials ran";
    return result;
  }
};

Json dims_json(Variant v, const char* level) {
  return {{"variant", variant_name(v)}, {"level", level}};
}

// Base weights with random (non-unit) norm gains so the gain path is covered.
BaseWeights<double> random_base(const ModelConfig& cfg, std::uint64_t seed) {
  auto base = BaseWeights<double>::random(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  auto fill = [&](Tensor<double>& t) { t = uniform(t.shape(), rng, 0.5, 1.5); };
  fill(base.final_norm);
  for (auto& l : base.layers) {
    fill(l.attn_norm);
    fill(l.ffn_norm);
  }
  return base;
}

// Copy of `base` with one weight of the first layer's query and gate
// projections moved by `delta`.
BaseWeights<double> perturbed(const BaseWeights<double>& base, double delta) {
  BaseWeights<double> out = base;
  out.embed = base.embed.clone();
  out.final_norm = base.final_norm.clone();
  for (auto& l : out.layers) {
    for (Tensor<double>* t : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.wgate,
                              &l.wup, &l.wdown}) {
      *t = t->clone();
    }
  }
  out.layers[0].wq.mutable_data()[0] += delta;
  out.layers[0].wgate.mutable_data()[0] += delta;
  return out;
}

// Spec for trial t: cycles through the option combinations the variant
// accepts so block and model cells see relu, stacked deltas, C and add_set
// overrides.
AdapterSpec trial_spec(Variant v, std::size_t rank, std::size_t t) {
  AdapterSpec s = AdapterSpec::preset(v, rank);
  const bool ffba = s.is_ffba() || v == Variant::kFpa;
  if (!ffba) return s;
  const std::size_t mode = t % 5;
  if (mode == 1 || mode == 4) s.nonlinearity = Nonlinearity::kRelu;
  if (mode == 2 || mode == 4) s.shared_backward = false;
  if ((mode == 3 || mode == 4) && v == Variant::kFfbaAB) s.use_c = true;
  if (mode == 4 && v != Variant::kFpa) s.add_set = {Projection::kKey, Projection::kValue, Projection::kUp};
  s.validate();
  return s;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, static_cast<int>(vocab) - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Layer-level cells

struct LayerFixture {
  Tensor<double> w, w_fused;  // w_fused carries the canary perturbation
  Tensor<double> x;
  std::mt19937_64 rng;
};

LayerFixture layer_fixture(const EquivalenceOptions& o, std::uint64_t seed) {
  LayerFixture f{{}, {}, {}, std::mt19937_64(seed)};
  f.w = uniform({o.d_out, o.d_in}, f.rng);
  f.w_fused = f.w.clone();
  f.w_fused.mutable_data()[0] += o.canary_perturbation;
  f.x = uniform({o.d_in, o.tokens}, f.rng);
  return f;
}

void layer_cells(Variant variant, const EquivalenceOptions& o, VerifyReport& report) {
  const std::size_t r = o.rank;
  Json dims = dims_json(variant, "layer");
  dims["d_in"] = o.d_in;
  dims["d_out"] = o.d_out;
  dims["rank"] = r;
  dims["tokens"] = o.tokens;
  std::map<std::string, Cell> cells;
  auto cell = [&](const std::string& name) -> Cell& {
    auto it = cells.find(name);
    if (it == cells.end()) {
      it = cells.emplace(name, Cell("equivalence", "layer." + name, o.tolerance, o.seed, dims)).first;
    }
    return it->second;
  };

  for (std::size_t t = 0; t < o.trials; ++t) {
    auto f = layer_fixture(o, trial_seed(o.seed, t, 0x4c41u));
    const Matrix W = reference::from_tensor(f.w), X = reference::from_tensor(f.x);
    const Matrix WX = reference::mm(W, X);
    switch (variant) {
      case Variant::kNone: {
        FusedLinearLayer<double> layer("l", LayerRole::kPlain, {f.w_fused, {}, {}, {}});
        cell("plain_vs_oracle").observe(rel_error(plain_forward(layer, f.x), WX), t);
        break;
      }
      case Variant::kLora:
      case Variant::kPfLora: {
        auto a = uniform({r, o.d_in}, f.rng), b = uniform({o.d_out, r}, f.rng);
        FusedLinearLayer<double> layer("l", LayerRole::kLora, {f.w_fused, a, b, {}});
        Matrix expect = WX;
        reference::add_into(expect, reference::mm(reference::from_tensor(b),
                                                  reference::mm(reference::from_tensor(a), X)));
        const auto naive = lora_naive_forward(layer, f.x);
        const auto fused = pf_lora_forward(layer, f.x);
        const bool pf = variant == Variant::kPfLora;
        cell(pf ? "pf_lora_vs_oracle" : "lora_vs_oracle").observe(rel_error(pf ? fused : naive, expect), t);
        cell("pf_lora_vs_lora").observe(rel_error(fused.data(), naive.data()), t);
        break;
      }
      case Variant::kFfa: {
        auto a = uniform({2 * r, o.d_in}, f.rng);
        FusedLinearLayer<double> layer("l", LayerRole::kFfl, {f.w_fused, a, {}, {}}, true);
        Matrix expect = WX;
        reference::tile_add(expect, reference::mm(reference::from_tensor(a), X));
        cell("ffa_vs_unfused").observe(rel_error(ffa_forward(layer, f.x), expect), t);
        break;
      }
      default: {
        // Forward side: plain and shrunk FFL.
        auto a = uniform({r, o.d_in}, f.rng);
        const Matrix AX = reference::mm(reference::from_tensor(a), X);
        for (bool shrink : {false, true}) {
          if (shrink && variant == Variant::kFpa) continue;
          FusedLinearLayer<double> layer("l", LayerRole::kFfl, {f.w_fused, a, {}, {}}, shrink);
          const auto out = ffl_forward(layer, f.x);
          Matrix expect = WX;
          if (shrink) reference::tile_add(expect, AX);
          cell(shrink ? "ffl_shrink_vs_unfused" : "ffl_vs_unfused")
              .observe(std::max(rel_error(out.y, expect), rel_error(out.dy, AX)), t);
        }
        // Backward side.
        auto b = uniform({o.d_out, r}, f.rng);
        auto dx = uniform({r, o.tokens}, f.rng);
        const Matrix DX = reference::from_tensor(dx);
        Matrix wx_bdx = WX;
        reference::add_into(wx_bdx, reference::mm(reference::from_tensor(b), DX));
        if (variant == Variant::kFfbaAB) {
          auto a2 = uniform({r, o.d_in}, f.rng);
          auto c = uniform({r, r}, f.rng);
          for (bool with_c : {true, false}) {
            FusedLinearLayer<double> layer("l", LayerRole::kFfbl,
                                           {f.w_fused, a2, b, with_c ? std::optional(c) : std::nullopt}, true);
            const auto out = ffbl_forward(layer, f.x, dx);
            // Four separate products: W x, B dx, A x, C dx.
            Matrix dy = reference::mm(reference::from_tensor(a2), X);
            if (with_c) reference::add_into(dy, reference::mm(reference::from_tensor(c), DX));
            Matrix y = wx_bdx;
            reference::tile_add(y, dy);
            cell(with_c ? "ffbl_vs_four_products" : "ffbl_no_c_vs_products")
                .observe(std::max(rel_error(out.y, y), rel_error(out.dy, dy)), t);
          }
        } else {
          FusedLinearLayer<double> layer("l", LayerRole::kFbl, {f.w_fused, {}, b, {}});
          cell("fbl_vs_wx_plus_bdx").observe(rel_error(fbl_forward(layer, f.x, dx), wx_bdx), t);
        }
        break;
      }
    }
  }
  for (auto& [name, c] : cells) report.add(c.finish(o.trials));
}

// ---------------------------------------------------------------------------
// Block- and model-level cells

std::vector<ops::KeyRange> causal_ranges(std::size_t n) {
  std::vector<ops::KeyRange> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = {0, j + 1};
  return out;
}

void model_cells(Variant variant, const EquivalenceOptions& o, VerifyReport& report) {
  constexpr std::size_t kTokens = 6;
  Json bdims = dims_json(variant, "block");
  Json mdims = dims_json(variant, "model");
  const auto micro = verify_micro_config(variant);
  for (Json* d : {&bdims, &mdims}) {
    (*d)["d_model"] = micro.d_model;
    (*d)["n_heads"] = micro.n_heads;
    (*d)["n_kv_heads"] = micro.n_kv_heads;
    (*d)["d_ff"] = micro.d_ff;
    (*d)["rank"] = micro.adapter.rank;
    (*d)["tokens"] = kTokens;
  }
  mdims["n_layers"] = micro.n_layers;
  mdims["vocab_size"] = micro.vocab_size;
  Cell attn("equivalence", "block.attention_vs_parallel_oracle", o.tolerance, o.seed, bdims);
  Cell ffn("equivalence", "block.ffn_vs_parallel_oracle", o.tolerance, o.seed, bdims);
  Cell logits("equivalence", "model.logits_vs_parallel_oracle", o.tolerance, o.seed, mdims);

  std::vector<std::size_t> positions(kTokens);
  for (std::size_t j = 0; j < kTokens; ++j) positions[j] = j;
  const auto ranges = causal_ranges(kTokens);

  for (std::size_t t = 0; t < o.trials; ++t) {
    const std::uint64_t seed = trial_seed(o.seed, t, 0x424cu);
    ModelConfig cfg = micro;
    cfg.adapter = trial_spec(variant, micro.adapter.rank, t);
    const auto base = random_base(cfg, seed);
    const auto adapters = random_adapters(cfg, seed + 1);
    const TransformerModel<double> model(
        cfg, o.canary_perturbation != 0.0 ? perturbed(base, o.canary_perturbation) : base, adapters);
    std::mt19937_64 rng(seed + 2);
    const auto x = uniform({cfg.d_model, kTokens}, rng);
    const Matrix X = reference::from_tensor(x);
    const BlockContext ctx{positions, ranges};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      attn.observe(rel_error(mha_forward(model.layers()[l].attn, x, cfg, ctx),
                             reference::attention_block(cfg, base, adapters, l, X)),
                   t);
      ffn.observe(rel_error(ffn_forward(model.layers()[l].ffn, x, cfg),
                            reference::ffn_block(cfg, base, adapters, l, X)),
                  t);
    }
    const auto tokens = random_tokens(kTokens, cfg.vocab_size, rng);
    TokenBatch batch;
    batch.append(tokens);
    logits.observe(rel_error(model.forward(batch), reference::logits(cfg, base, adapters, tokens)), t);
  }
  report.add(attn.finish(o.trials));
  report.add(ffn.finish(o.trials));
  report.add(logits.finish(o.trials));
}

CheckResult coverage_check(const VerifyReport& report, std::span<const Variant> variants,
                           std::uint64_t seed) {
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& c : report.checks) {
    if (c.suite != "equivalence" || !c.dims.contains("variant")) continue;
    seen.emplace(c.dims["variant"].get<std::string>(), c.dims["level"].get<std::string>());
  }
  CheckResult out;
  out.suite = "equivalence";
  out.name = "coverage";
  out.seed = seed;
  out.passed = true;
  std::size_t expected = 0;
  for (Variant v : variants) {
    for (const char* level : {"layer", "block", "model"}) {
      ++expected;
      if (!seen.count({variant_name(v), level})) {
        out.passed = false;
        out.detail += std::string(out.detail.empty() ? "missing " : ", ") + variant_name(v) + "/" + level;
      }
    }
  }
  out.dims = {{"cells", expected}};
  if (out.passed) out.detail = std::to_string(expected) + " variant x level cells covered";
  return out;
}

}  // namespace

ModelConfig verify_micro_config(Variant variant, std::size_t rank) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 16;
  c.vocab_size = 16;
  c.max_seq_len = 32;
  c.adapter = AdapterSpec::preset(variant, variant == Variant::kNone ? 0 : rank);
  c.validate();
  return c;
}

AdapterTensors<double> random_adapters(const ModelConfig& cfg, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  AdapterTensors<double> out;
  for (auto& [name, t] : init_adapters<double>(cfg, seed)) {
    out.emplace(name, uniform(t.shape(), rng, -scale, scale, true));
  }
  return out;
}

VerifyReport equivalence_suite(Variant variant, const EquivalenceOptions& opts) {
  VerifyReport report;
  layer_cells(variant, opts, report);
  model_cells(variant, opts, report);
  const Variant one[] = {variant};
  report.add(coverage_check(report, one, opts.seed));
  return report;
}

VerifyReport equivalence_all(const EquivalenceOptions& opts) {
  VerifyReport report;
  for (Variant v : all_variants()) {
    layer_cells(v, opts, report);
    model_cells(v, opts, report);
  }
  report.add(coverage_check(report, all_variants(), opts.seed));
  return report;
}

// ---------------------------------------------------------------------------
// Base preservation

VerifyReport base_preservation_suite(std::size_t prompts, std::uint64_t seed, double tolerance) {
  VerifyReport report;
  ModelConfig cfg = ModelConfig::toy();
  const auto base = random_base(cfg, seed);
  const TransformerModel<double> plain(cfg, base, {});
  std::mt19937_64 rng(seed + 1);
  std::uniform_int_distribution<std::size_t> len(4, 24);
  std::vector<std::vector<int>> inputs;
  for (std::size_t i = 0; i < prompts; ++i) inputs.push_back(random_tokens(len(rng), cfg.vocab_size, rng));

  for (Variant v : all_variants()) {
    if (v == Variant::kNone) continue;
    std::vector<AdapterSpec> specs = {AdapterSpec::preset(v, 8)};
    if (v == Variant::kFfbaAB) {
      AdapterSpec s = specs.front();
      s.use_c = true;
      s.nonlinearity = Nonlinearity::kRelu;
      specs.push_back(s);
    }
    for (const auto& spec : specs) {
      const auto model = plain.with_adapters(spec, seed);
      std::string name = std::string("zero_init.") + variant_name(v);
      if (spec.use_c) name += ".use_c_relu";
      Json dims = {{"variant", variant_name(v)}, {"rank", spec.rank}, {"prompts", prompts},
                   {"d_model", cfg.d_model}, {"n_layers", cfg.n_layers}};
      Cell cell("base_preservation", name, tolerance, seed, dims);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        TokenBatch batch;
        batch.append(inputs[i]);
        cell.observe(rel_error(model.forward(batch).data(), plain.forward(batch).data()), i);
      }
      report.add(cell.finish(prompts));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Gradient checks

const char* grad_scope_name(GradScope s) {
  switch (s) {
    case GradScope::kPrimitive: return "primitive";
    case GradScope::kLayer: return "layer";
    case GradScope::kBlock: return "block";
    case GradScope::kModel: return "model";
  }
  return "?";
}

GradScope parse_grad_scope(const std::string& name) {
  for (GradScope s : {GradScope::kPrimitive, GradScope::kLayer, GradScope::kBlock, GradScope::kModel}) {
    if (name == grad_scope_name(s)) return s;
  }
  throw ConfigError("unknown gradient-check scope '" + name + "'");
}

namespace {

struct GradCase {
  std::string name;
  Json dims = Json::object();
  std::vector<Tensor<double>> inputs;  // checked against finite differences
  std::vector<Tensor<double>> frozen;  // must not receive any gradient
  std::function<Tensor<double>()> loss;
  // 0 checks every entry; otherwise a seeded sample of this many per tensor.
  std::size_t sample = 0;
};

CheckResult run_grad_case(GradCase& gc, const char* scope, double tol, double step, std::uint64_t seed) {
  CheckResult out;
  out.suite = "grad_check";
  out.name = std::string(scope) + "." + gc.name;
  out.tolerance = tol;
  out.seed = seed;
  out.dims = gc.dims;
  out.dims["scope"] = scope;

  if (gc.inputs.empty()) {
    // An adapter-free model has nothing trainable in scope.
    out.passed = true;
    out.detail = "no trainable tensors";
    out.dims["checked_params"] = 0;
    return out;
  }
  for (auto& t : gc.inputs) t.clear_grad();
  for (auto& t : gc.frozen) t.clear_grad();
  {
    Tape tape;
    TapeScope scope_guard(tape);
    tape.backward(gc.loss());
  }
  std::size_t params = 0;
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t k = 0; k < gc.inputs.size(); ++k) {
    auto& t = gc.inputs[k];
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (gc.sample > 0 && gc.sample < idx.size()) {
      std::mt19937_64 pick(seed + k);
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(gc.sample);
      std::sort(idx.begin(), idx.end());
    }
    std::vector<double> analytic(idx.size(), 0.0);
    if (auto g = t.grad_data(); !g.empty()) {
      for (std::size_t i = 0; i < idx.size(); ++i) analytic[i] = g[idx[i]];
    }
    std::vector<double> numeric(idx.size());
    {
      NoGradScope no_grad;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double x0 = t.data()[idx[i]];
        const double h = step * std::max(1.0, std::abs(x0));
        t.mutable_data()[idx[i]] = x0 + h;
        const double fp = gc.loss().item();
        t.mutable_data()[idx[i]] = x0 - h;
        const double fm = gc.loss().item();
        t.mutable_data()[idx[i]] = x0;
        numeric[i] = (fp - fm) / (2.0 * h);
      }
    }
    params += idx.size();
    double e = rel_error(analytic, numeric);
    if (std::isnan(e)) e = INFINITY;
    if (k == 0 || e > worst) {
      worst = e;
      worst_name = "input " + std::to_string(k);
    }
  }
  std::size_t leaked = 0;
  for (const auto& t : gc.frozen) {
    for (double g : t.grad_data()) leaked += g != 0.0;
  }
  out.max_rel_error = worst;
  out.dims["checked_params"] = params;
  out.passed = worst <= tol && leaked == 0;
  out.detail = leaked ? std::to_string(leaked) + " non-zero frozen-weight gradient entries"
                      : "worst " + worst_name;
  return out;
}

// Generic scalar: sum(out * R) with fixed random R.
Tensor<double> project_scalar(const Tensor<double>& out, const Tensor<double>& r) {
  return ops::sum(ops::mul(out, r));
}

std::vector<GradCase> primitive_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCase> cases;
  auto weights = [&](Shape s) { return uniform(std::move(s), rng); };
  auto input = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    return uniform(std::move(s), rng, lo, hi, true);
  };
  auto add_unary = [&](const char* name, Tensor<double> x, Shape out_shape,
                       std::function<Tensor<double>(const Tensor<double>&)> f) {
    auto r = weights(std::move(out_shape));
    cases.push_back({name, {}, {x}, {}, [x, r, f] { return project_scalar(f(x), r); }});
  };
  {
    auto a = input({5, 4}), b = input({4, 3});
    auto r = weights({5, 3});
    cases.push_back({"matmul", {}, {a, b}, {}, [=] { return project_scalar(ops::matmul(a, b), r); }});
  }
  add_unary("transpose", input({3, 5}), {5, 3}, [](const auto& x) { return ops::transpose(x); });
  {
    auto a = input({2, 3}), b = input({4, 3});
    auto r = weights({6, 3});
    cases.push_back({"concat_rows", {}, {a, b}, {}, [=] { return project_scalar(ops::concat_rows({a, b}), r); }});
  }
  {
    auto a = input({3, 2}), b = input({3, 4});
    auto r = weights({3, 6});
    cases.push_back({"concat_cols", {}, {a, b}, {}, [=] { return project_scalar(ops::concat_cols({a, b}), r); }});
  }
  add_unary("slice_rows", input({6, 3}), {3, 3}, [](const auto& x) { return ops::slice_rows(x, 2, 5); });
  {
    auto y = input({8, 3}), d = input({2, 3});
    auto r = weights({8, 3});
    cases.push_back({"repeat_add", {}, {y, d}, {}, [=] { return project_scalar(ops::repeat_add(y, d), r); }});
  }
  {
    auto a = input({4, 3}), b = input({4, 3});
    auto r = weights({4, 3});
    cases.push_back({"add", {}, {a, b}, {}, [=] { return project_scalar(ops::add(a, b), r); }});
    auto c = input({4, 3}), e = input({4, 3});
    cases.push_back({"mul", {}, {c, e}, {}, [=] { return project_scalar(ops::mul(c, e), r); }});
  }
  add_unary("scale", input({4, 3}), {4, 3}, [](const auto& x) { return ops::scale(x, 0.75); });
  {
    // Entries kept away from the kink.
    auto x = input({4, 3}, 0.1, 1.0);
    auto m = x.mutable_data();
    for (std::size_t i = 0; i < m.size(); i += 2) m[i] = -m[i];
    add_unary("relu", x, {4, 3}, [](const auto& v) { return ops::relu(v); });
  }
  add_unary("silu", input({4, 3}, -3.0, 3.0), {4, 3}, [](const auto& x) { return ops::silu(x); });
  add_unary("softmax_cols", input({5, 3}, -2.0, 2.0), {5, 3}, [](const auto& x) { return ops::softmax_cols(x); });
  {
    auto x = input({6, 3}), g = input({6, 1}, 0.5, 1.5);
    auto r = weights({6, 3});
    cases.push_back({"rmsnorm_cols", {}, {x, g}, {}, [=] { return project_scalar(ops::rmsnorm_cols(x, g, 1e-5), r); }});
  }
  {
    static const std::vector<std::size_t> pos = {0, 3, 7};
    add_unary("rope", input({8, 3}), {8, 3},
              [](const auto& x) { return ops::rope(x, 4, std::span<const std::size_t>(pos), 10000.0); });
  }
  {
    auto q = input({8, 4}), k = input({4, 4}), v = input({4, 4});
    auto r = weights({8, 4});
    static const std::vector<ops::KeyRange> ranges = {{0, 1}, {0, 2}, {1, 3}, {0, 4}};
    const ops::AttentionGeometry geo{2, 1, 4};
    cases.push_back({"attention", {}, {q, k, v}, {}, [=] {
                       return project_scalar(ops::attention(q, k, v, geo, std::span(ranges)), r);
                     }});
  }
  {
    static const std::vector<int> tokens = {2, 0, 2, 5};
    add_unary("embedding", input({6, 3}), {3, 4}, [](const auto& t) { return ops::embedding(t, std::span(tokens)); });
  }
  {
    static const std::vector<int> targets = {1, -1, 4, 0};
    auto x = input({5, 4}, -2.0, 2.0);
    cases.push_back({"cross_entropy_cols", {}, {x}, {}, [=] { return ops::cross_entropy_cols(x, std::span(targets)); }});
  }
  {
    auto x = input({3, 3});
    cases.push_back({"sum", {}, {x}, {}, [=] { return ops::sum(x); }});
  }
  return cases;
}

std::vector<GradCase> layer_cases(Variant v, std::uint64_t seed) {
  constexpr std::size_t kIn = 6, kOut = 8, kRank = 2, kTokens = 3;
  std::mt19937_64 rng(seed);
  auto frozen = [&](Shape s) { return uniform(std::move(s), rng); };
  auto train = [&](Shape s) { return uniform(std::move(s), rng, -1.0, 1.0, true); };
  const Json dims = {{"variant", variant_name(v)}, {"d_in", kIn}, {"d_out", kOut}, {"rank", kRank}};
  std::vector<GradCase> cases;
  auto w = frozen({kOut, kIn});
  auto x = train({kIn, kTokens});
  auto ry = frozen({kOut, kTokens});
  switch (v) {
    case Variant::kNone: {
      FusedLinearLayer<double> layer("l", LayerRole::kPlain, {w, {}, {}, {}});
      cases.push_back({"plain", dims, {x}, {w}, [=] { return project_scalar(plain_forward(layer, x), ry); }});
      break;
    }
    case Variant::kLora:
    case Variant::kPfLora: {
      auto a = train({kRank, kIn}), b = train({kOut, kRank});
      FusedLinearLayer<double> layer("l", LayerRole::kLora, {w, a, b, {}});
      const bool pf = v == Variant::kPfLora;
      cases.push_back({pf ? "pf_lora" : "lora", dims, {a, b, x}, {w}, [=] {
                         return project_scalar(pf ? pf_lora_forward(layer, x) : lora_naive_forward(layer, x), ry);
                       }});
      break;
    }
    case Variant::kFfa: {
      auto a = train({2 * kRank, kIn});
      FusedLinearLayer<double> layer("l", LayerRole::kFfl, {w, a, {}, {}}, true);
      cases.push_back({"ffa", dims, {a, x}, {w}, [=] { return project_scalar(ffa_forward(layer, x), ry); }});
      break;
    }
    default: {
      auto rd = frozen({kRank, kTokens});
      for (bool shrink : {false, true}) {
        if (shrink && v == Variant::kFpa) continue;
        auto a = train({kRank, kIn});
        FusedLinearLayer<double> layer("l", LayerRole::kFfl, {w, a, {}, {}}, shrink);
        cases.push_back({shrink ? "ffl_shrink" : "ffl", dims, {a, x}, {w}, [=] {
                           auto out = ffl_forward(layer, x);
                           return ops::add(project_scalar(out.y, ry), project_scalar(out.dy, rd));
                         }});
      }
      auto dx = train({kRank, kTokens});
      auto b = train({kOut, kRank});
      if (v == Variant::kFfbaAB) {
        auto a = train({kRank, kIn}), c = train({kRank, kRank});
        FusedLinearLayer<double> layer("l", LayerRole::kFfbl, {w, a, b, c}, true);
        cases.push_back({"ffbl", dims, {a, b, c, x, dx}, {w}, [=] {
                           auto out = ffbl_forward(layer, x, dx);
                           return ops::add(project_scalar(out.y, ry), project_scalar(out.dy, rd));
                         }});
      } else {
        FusedLinearLayer<double> layer("l", LayerRole::kFbl, {w, {}, b, {}});
        cases.push_back({"fbl", dims, {b, x, dx}, {w}, [=] { return project_scalar(fbl_forward(layer, x, dx), ry); }});
      }
      break;
    }
  }
  return cases;
}

// Micro-model configurations checked per variant: the preset and, for the
// forward/backward family, one with relu, stacked deltas and (ab) C.
std::vector<std::pair<std::string, ModelConfig>> grad_configs(Variant v) {
  std::vector<std::pair<std::string, ModelConfig>> out;
  ModelConfig cfg = verify_micro_config(v);
  out.emplace_back("preset", cfg);
  if (cfg.adapter.is_ffba() || v == Variant::kFpa) {
    cfg.adapter.nonlinearity = Nonlinearity::kRelu;
    cfg.adapter.shared_backward = false;
    cfg.adapter.use_c = v == Variant::kFfbaAB;
    cfg.validate();
    out.emplace_back("relu_stacked", cfg);
  }
  return out;
}

std::vector<Tensor<double>> tensors_with_prefix(const AdapterTensors<double>& adapters,
                                                const std::string& prefix) {
  std::vector<Tensor<double>> out;
  for (const auto& [name, t] : adapters) {
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  }
  return out;
}

std::vector<Tensor<double>> base_tensors(const BaseWeights<double>& base) {
  std::vector<Tensor<double>> out;
  for (const auto& nt : base.named()) out.push_back(nt.tensor);
  return out;
}

Json micro_dims(Variant v, const std::string& config, const ModelConfig& cfg) {
  return {{"variant", variant_name(v)}, {"config", config},       {"d_model", cfg.d_model},
          {"n_layers", cfg.n_layers},   {"d_ff", cfg.d_ff},        {"rank", cfg.adapter.rank},
          {"vocab_size", cfg.vocab_size}};
}

void block_cases(Variant v, std::uint64_t seed, std::vector<GradCase>& cases) {
  constexpr std::size_t kTokens = 4;
  static const std::vector<std::size_t> positions = {0, 1, 2, 3};
  static const auto ranges = causal_ranges(kTokens);
  for (const auto& [label, cfg] : grad_configs(v)) {
    const TransformerModel<double> model(cfg, random_base(cfg, seed), random_adapters(cfg, seed + 1));
    std::mt19937_64 rng(seed + 2);
    auto x = uniform({cfg.d_model, kTokens}, rng, -1.0, 1.0, true);
    auto r = uniform({cfg.d_model, kTokens}, rng);
    const auto base = model.base().layers[0];
    const ModelConfig c = cfg;
    auto attn_inputs = tensors_with_prefix(model.adapters(), "layers.0.attn.");
    attn_inputs.push_back(x);
    cases.push_back({"attention." + label, micro_dims(v, label, cfg), attn_inputs,
                     {base.attn_norm, base.wq, base.wk, base.wv, base.wo}, [model, x, r, c] {
                       const BlockContext ctx{positions, ranges};
                       return project_scalar(mha_forward(model.layers()[0].attn, x, c, ctx), r);
                     }});
    auto ffn_inputs = tensors_with_prefix(model.adapters(), "layers.0.ffn.");
    ffn_inputs.push_back(x);
    cases.push_back({"ffn." + label, micro_dims(v, label, cfg), ffn_inputs,
                     {base.ffn_norm, base.wgate, base.wup, base.wdown}, [model, x, r, c] {
                       return project_scalar(ffn_forward(model.layers()[0].ffn, x, c), r);
                     }});
  }
}

void model_cases(Variant v, std::uint64_t seed, std::vector<GradCase>& cases) {
  for (const auto& [label, cfg] : grad_configs(v)) {
    const TransformerModel<double> model(cfg, random_base(cfg, seed), random_adapters(cfg, seed + 1));
    std::mt19937_64 rng(seed + 2);
    TokenBatch batch;
    for (std::size_t len : {5, 3}) {
      auto seq = random_tokens(len, cfg.vocab_size, rng);
      auto tgt = random_tokens(len, cfg.vocab_size, rng);
      tgt[0] = -1;
      batch.append(seq, tgt);
    }
    std::vector<Tensor<double>> inputs;
    for (const auto& [name, t] : model.adapters()) inputs.push_back(t);
    cases.push_back({"loss." + label, micro_dims(v, label, cfg), inputs, base_tensors(model.base()),
                     [model, batch] { return model.loss(batch); }});
  }
}

// Full toy geometry (the configuration used by the training protocol) on a
// short two-sequence batch.
void toy_model_case(Variant v, std::uint64_t seed, std::vector<GradCase>& cases) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.adapter = AdapterSpec::preset(v, v == Variant::kNone ? 0 : 8);
  const TransformerModel<double> model(cfg, random_base(cfg, seed), random_adapters(cfg, seed + 1, 0.2));
  std::mt19937_64 rng(seed + 2);
  TokenBatch batch;
  for (std::size_t len : {4, 3}) {
    auto seq = random_tokens(len, cfg.vocab_size, rng);
    auto tgt = random_tokens(len, cfg.vocab_size, rng);
    batch.append(seq, tgt);
  }
  std::vector<Tensor<double>> inputs;
  for (const auto& [name, t] : model.adapters()) inputs.push_back(t);
  cases.push_back({"toy_loss", micro_dims(v, "toy", cfg), inputs, base_tensors(model.base()),
                   [model, batch] { return model.loss(batch); }, 12});
}

// Explicit frozen-weight contract: one backward pass through the full model
// must leave every base tensor without a gradient.
CheckResult frozen_base_check(Variant v, std::uint64_t seed) {
  const ModelConfig cfg = verify_micro_config(v);
  const TransformerModel<double> model(cfg, random_base(cfg, seed), random_adapters(cfg, seed + 1));
  TokenBatch batch;
  std::vector<int> seq = {1, 2, 3, 4, 5}, tgt = {2, 3, 4, 5, 6};
  batch.append(seq, tgt);
  if (!model.adapters().empty()) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(model.loss(batch));
  }
  CheckResult out;
  out.suite = "grad_check";
  out.name = "model.frozen_base";
  out.seed = seed;
  out.dims = micro_dims(v, "preset", cfg);
  out.dims["scope"] = "model";
  std::size_t with_grad = 0, nonzero = 0;
  for (const auto& nt : model.base().named()) {
    if (nt.tensor.has_grad()) ++with_grad;
    for (double g : nt.tensor.grad_data()) nonzero += g != 0.0;
  }
  out.passed = nonzero == 0;
  out.detail = std::to_string(with_grad) + " base tensors hold a gradient buffer, " +
               std::to_string(nonzero) + " non-zero entries";
  return out;
}

}  // namespace

VerifyReport grad_check_suite(GradScope scope, const GradCheckOptions& opts,
                              std::span<const Variant> variants) {
  if (variants.empty()) variants = all_variants();
  VerifyReport report;
  const char* name = grad_scope_name(scope);
  if (scope == GradScope::kPrimitive) {
    auto cases = primitive_cases(opts.seed);
    for (auto& gc : cases) report.add(run_grad_case(gc, name, opts.primitive_tol, opts.step, opts.seed));
    return report;
  }
  for (Variant v : variants) {
    const std::uint64_t seed = trial_seed(opts.seed, static_cast<std::size_t>(v), 0x4743u);
    std::vector<GradCase> cases;
    double tol = opts.model_tol;
    switch (scope) {
      case GradScope::kLayer:
        cases = layer_cases(v, seed);
        tol = opts.primitive_tol;
        break;
      case GradScope::kBlock:
        block_cases(v, seed, cases);
        break;
      default:
        model_cases(v, seed, cases);
        if (opts.toy_model) toy_model_case(v, seed, cases);
        break;
    }
    for (auto& gc : cases) {
      gc.name = std::string(variant_name(v)) + "." + gc.name;
      gc.dims["variant"] = variant_name(v);
      report.add(run_grad_case(gc, name, tol, opts.step, seed));
    }
    if (scope == GradScope::kModel) report.add(frozen_base_check(v, seed));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Parameter table

std::string format_millions(std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(n) / 1e6);
  return buf;
}

std::vector<ParamRow> param_table(std::span<const std::string> shapes, std::size_t rank) {
  std::vector<ParamRow> rows;
  for (const auto& shape : shapes) {
    for (Variant v : all_variants()) {
      ModelConfig cfg = ModelConfig::preset(shape);
      cfg.adapter = AdapterSpec::preset(v, v == Variant::kNone ? 0 : rank);
      const auto pc = param_count(cfg);
      rows.push_back({shape, v, cfg.adapter.rank, pc.trainable, pc.total});
    }
  }
  return rows;
}

std::string param_table_markdown(const std::vector<ParamRow>& rows) {
  std::ostringstream os;
  os << "| shape | variant | rank | #Param | trainable | total |\n";
  os << "|---|---|---:|---:|---:|---:|\n";
  for (const auto& r : rows) {
    os << "| " << r.shape << " | " << variant_name(r.variant) << " | " << r.rank << " | "
       << format_millions(r.trainable) << " | " << r.trainable << " | " << r.total << " |\n";
  }
  return os.str();
}

std::string param_table_csv(const std::vector<ParamRow>& rows) {
  std::ostringstream os;
  os << "shape,variant,rank,params_rendered,trainable,total\n";
  for (const auto& r : rows) {
    os << r.shape << ',' << variant_name(r.variant) << ',' << r.rank << ',' << format_millions(r.trainable)
       << ',' << r.trainable << ',' << r.total << '\n';
  }
  return os.str();
}

}  // namespace flora
