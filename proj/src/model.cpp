// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "flora/op_counter.hpp"
#include "flora/tape.hpp"

namespace flora {

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.adapter = AdapterSpec::preset(Variant::kNone, 0);
  return c;
}

ModelConfig ModelConfig::bench() {
  ModelConfig c;
  c.d_model = 512;
  c.n_layers = 4;
  c.n_heads = 8;
  c.n_kv_heads = 2;
  c.d_ff = 1536;
  c.vocab_size = 256;
  c.max_seq_len = 512;
  return c;
}

ModelConfig ModelConfig::llama1b() {
  ModelConfig c;
  c.d_model = 2048;
  c.n_layers = 16;
  c.n_heads = 32;
  c.n_kv_heads = 8;
  c.d_ff = 8192;
  c.vocab_size = 128256;
  c.max_seq_len = 2048;
  c.rope_theta = 500000.0;
  return c;
}

ModelConfig ModelConfig::llama3b() {
  ModelConfig c = llama1b();
  c.d_model = 3072;
  c.n_layers = 28;
  c.n_heads = 24;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "toy") return toy();
  if (name == "bench") return bench();
  if (name == "llama1b") return llama1b();
  if (name == "llama3b") return llama3b();
  throw ConfigError("unknown shape preset '" + name + "' (expected toy, bench, llama1b, llama3b)");
}

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> dims[] = {
      {"d_model", d_model}, {"n_layers", n_layers},     {"n_heads", n_heads},
      {"n_kv_heads", n_kv_heads}, {"d_ff", d_ff}, {"vocab_size", vocab_size},
      {"max_seq_len", max_seq_len}};
  for (const auto& [key, value] : dims) {
    if (value == 0) throw ConfigError(std::string("model.") + key + " must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
  if (n_heads % n_kv_heads != 0) {
    throw ConfigError("model.n_heads must be divisible by model.n_kv_heads");
  }
  if (head_dim() % 2 != 0) throw ConfigError("model head dimension must be even for rotary embedding");
  if (!(rope_theta > 0.0)) throw ConfigError("model.rope_theta must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be positive");
  adapter.validate();
  for (const auto& p : projection_layouts(*this)) {
    if (p.shrink && p.out_features % p.a_rows != 0) {
      throw ConfigError("adapter.rank: forward rank " + std::to_string(p.a_rows) +
                        " does not divide the " + projection_name(p.projection) +
                        " output dimension " + std::to_string(p.out_features));
    }
    if (p.layer > 0) break;
  }
}

std::size_t ProjectionLayout::adapter_params() const {
  return a_rows * in_features + out_features * b_cols + (has_c ? a_rows * b_cols : 0);
}

std::string projection_site(std::size_t layer, Projection p) {
  const bool attn = p == Projection::kQuery || p == Projection::kKey || p == Projection::kValue ||
                    p == Projection::kOutput;
  static const char* short_names[] = {"q", "k", "v", "o", "gate", "up", "down"};
  return "layers." + std::to_string(layer) + (attn ? ".attn." : ".ffn.") +
         short_names[static_cast<int>(p)];
}

std::vector<ProjectionLayout> projection_layouts(const ModelConfig& c) {
  const AdapterSpec spec = c.adapter.normalized();
  const std::size_t r = spec.rank;
  std::vector<ProjectionLayout> out;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (Projection p : all_projections()) {
      ProjectionLayout pl;
      pl.name = projection_site(l, p);
      pl.layer = l;
      pl.projection = p;
      switch (p) {
        case Projection::kQuery:
        case Projection::kOutput:
          pl.out_features = c.d_model;
          pl.in_features = c.d_model;
          break;
        case Projection::kKey:
        case Projection::kValue:
          pl.out_features = c.kv_dim();
          pl.in_features = c.d_model;
          break;
        case Projection::kGate:
        case Projection::kUp:
          pl.out_features = c.d_ff;
          pl.in_features = c.d_model;
          break;
        case Projection::kDown:
          pl.out_features = c.d_model;
          pl.in_features = c.d_ff;
          break;
      }
      const bool backward_site = p == Projection::kOutput || p == Projection::kDown;
      switch (spec.variant) {
        case Variant::kNone:
          break;
        case Variant::kLora:
        case Variant::kPfLora:
          pl.role = LayerRole::kLora;
          pl.a_rows = r;
          pl.b_cols = r;
          break;
        case Variant::kFfa:
          pl.role = LayerRole::kFfl;
          pl.shrink = true;
          pl.a_rows = 2 * r;
          pl.a_zero_init = true;
          break;
        case Variant::kFfbaAB:
        case Variant::kFfbaAorB:
        case Variant::kFfbaQgAdd:
        case Variant::kFpa:
          if (!backward_site) {
            pl.role = LayerRole::kFfl;
            pl.a_rows = r;
            pl.shrink = spec.add_set.count(p) > 0;
            pl.a_zero_init = pl.shrink;
          } else {
            const std::size_t fan_in = p == Projection::kOutput ? 3 : 2;
            pl.b_cols = spec.shared_backward ? r : fan_in * r;
            if (spec.variant == Variant::kFfbaAB) {
              pl.role = LayerRole::kFfbl;
              pl.a_rows = r;
              pl.shrink = true;
              pl.a_zero_init = true;
              pl.has_c = spec.use_c;
            } else {
              pl.role = LayerRole::kFbl;
            }
          }
          break;
      }
      out.push_back(std::move(pl));
    }
  }
  return out;
}

std::uint64_t closed_form_trainable(const ModelConfig& c) {
  const AdapterSpec spec = c.adapter.normalized();
  const std::uint64_t d = c.d_model, kv = c.kv_dim(), f = c.d_ff, L = c.n_layers, r = spec.rank;
  switch (spec.variant) {
    case Variant::kNone:
      return 0;
    case Variant::kLora:
    case Variant::kPfLora:
      // q, o: d -> d; k, v: d -> kv; gate, up: d -> f; down: f -> d.
      return L * r * (2 * (d + d) + 2 * (d + kv) + 2 * (d + f) + (f + d));
    case Variant::kFfa:
      return L * 2 * r * (6 * d + f);
    default:
      break;
  }
  const std::uint64_t rb_o = spec.shared_backward ? r : 3 * r;
  const std::uint64_t rb_down = spec.shared_backward ? r : 2 * r;
  std::uint64_t per_layer = 5 * r * d + d * rb_o + d * rb_down;
  if (spec.variant == Variant::kFfbaAB) {
    per_layer += r * d + r * f;
    if (spec.use_c) per_layer += r * rb_o + r * rb_down;
  }
  return L * per_layer;
}

std::uint64_t base_param_count(const ModelConfig& c) {
  const std::uint64_t d = c.d_model, kv = c.kv_dim(), f = c.d_ff;
  const std::uint64_t per_layer = 2 * d + 2 * d * d + 2 * d * kv + 3 * d * f;
  return c.vocab_size * d + d + c.n_layers * per_layer;
}

ParamCount param_count(const ModelConfig& config) {
  ParamCount pc;
  pc.per_layer.assign(config.n_layers, 0);
  for (const auto& p : projection_layouts(config)) {
    const std::uint64_t n = p.adapter_params();
    pc.per_layer[p.layer] += n;
    pc.trainable += n;
    if (p.layer == 0) pc.per_projection[projection_name(p.projection)] = n;
  }
  const std::uint64_t closed = closed_form_trainable(config);
  if (closed != pc.trainable) {
    throw ContractError("param_count: closed form " + std::to_string(closed) +
                        " disagrees with layout enumeration " + std::to_string(pc.trainable));
  }
  pc.total = base_param_count(config) + pc.trainable;
  return pc;
}

void TokenBatch::append(std::span<const int> seq, std::span<const int> seq_targets) {
  if (seq.empty()) throw ShapeError("TokenBatch: empty sequence");
  if (!seq_targets.empty() && seq_targets.size() != seq.size()) {
    throw ShapeError("TokenBatch: " + std::to_string(seq_targets.size()) + " targets for " +
                     std::to_string(seq.size()) + " tokens");
  }
  const std::size_t start = tokens.size();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    tokens.push_back(seq[i]);
    targets.push_back(seq_targets.empty() ? -1 : seq_targets[i]);
    positions.push_back(i);
    ranges.push_back({start, start + i + 1});
  }
}

namespace {

std::uint64_t adapter_stream(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(element_count(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from_vector(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(element_count(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from_vector(std::move(shape), std::move(values));
}

}  // namespace

template <typename T>
BaseWeights<T> BaseWeights<T>::random(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  BaseWeights<T> w;
  const std::size_t d = c.d_model;
  w.embed = normal_tensor<T>({c.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  w.final_norm = Tensor<T>::full({d, 1}, T(1));
  auto proj = [&](std::size_t out, std::size_t in) {
    return uniform_tensor<T>({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Layer layer;
    layer.attn_norm = Tensor<T>::full({d, 1}, T(1));
    layer.wq = proj(d, d);
    layer.wk = proj(c.kv_dim(), d);
    layer.wv = proj(c.kv_dim(), d);
    layer.wo = proj(d, d);
    layer.ffn_norm = Tensor<T>::full({d, 1}, T(1));
    layer.wgate = proj(c.d_ff, d);
    layer.wup = proj(c.d_ff, d);
    layer.wdown = proj(d, c.d_ff);
    w.layers.push_back(std::move(layer));
  }
  return w;
}

template <typename T>
std::vector<NamedTensor<T>> BaseWeights<T>::named() const {
  std::vector<NamedTensor<T>> out = {{"embed", embed}, {"final_norm", final_norm}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "layers." + std::to_string(l);
    out.push_back({p + ".attn.norm", L.attn_norm});
    out.push_back({p + ".attn.q.W", L.wq});
    out.push_back({p + ".attn.k.W", L.wk});
    out.push_back({p + ".attn.v.W", L.wv});
    out.push_back({p + ".attn.o.W", L.wo});
    out.push_back({p + ".ffn.norm", L.ffn_norm});
    out.push_back({p + ".ffn.gate.W", L.wgate});
    out.push_back({p + ".ffn.up.W", L.wup});
    out.push_back({p + ".ffn.down.W", L.wdown});
  }
  return out;
}

template <typename T>
void BaseWeights<T>::set_trainable(bool on) {
  for (auto& nt : named()) nt.tensor.set_requires_grad(on);
}

template <typename T>
std::uint64_t BaseWeights<T>::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& nt : named()) h = content_hash(nt.tensor, h);
  return h;
}

template <typename T>
AdapterTensors<T> init_adapters(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(adapter_stream(seed));
  AdapterTensors<T> out;
  for (const auto& p : projection_layouts(c)) {
    if (p.a_rows > 0) {
      auto a = p.a_zero_init
                   ? Tensor<T>::zeros({p.a_rows, p.in_features})
                   : uniform_tensor<T>({p.a_rows, p.in_features},
                                       1.0 / std::sqrt(static_cast<double>(p.in_features)), rng);
      a.set_requires_grad(true);
      out.emplace(p.name + ".A", std::move(a));
    }
    if (p.b_cols > 0) {
      auto b = Tensor<T>::zeros({p.out_features, p.b_cols});
      b.set_requires_grad(true);
      out.emplace(p.name + ".B", std::move(b));
    }
    if (p.has_c) {
      auto cc = Tensor<T>::zeros({p.a_rows, p.b_cols});
      cc.set_requires_grad(true);
      out.emplace(p.name + ".C", std::move(cc));
    }
  }
  return out;
}

template <typename T>
void KVCache<T>::truncate(std::size_t n) {
  if (n > length) throw BoundsError("KVCache::truncate beyond current length");
  length = n;
}

namespace {

struct Projected {
  template <typename T>
  struct Out {
    Tensor<T> y;
    std::optional<Tensor<T>> dy;
  };
};

// Input-side projection: plain, a LoRA-style layer, ffa, or an FFL whose
// forward output feeds the block's shared backward adapter.
template <typename T>
Projected::Out<T> project(const FusedLinearLayer<T>& layer, const Tensor<T>& x, Variant variant) {
  switch (layer.role()) {
    case LayerRole::kPlain:
      return {plain_forward(layer, x), std::nullopt};
    case LayerRole::kLora:
      return {variant == Variant::kLora ? lora_naive_forward(layer, x) : pf_lora_forward(layer, x),
              std::nullopt};
    case LayerRole::kFfl: {
      if (variant == Variant::kFfa) return {ffa_forward(layer, x), std::nullopt};
      auto out = ffl_forward(layer, x);
      return {std::move(out.y), std::move(out.dy)};
    }
    default:
      break;
  }
  throw ConfigError("layer '" + layer.name() + "' cannot be used as an input projection");
}

// Output-side projection, taking the block's combined delta when present.
template <typename T>
Tensor<T> project_out(const FusedLinearLayer<T>& layer, const Tensor<T>& x,
                      const std::optional<Tensor<T>>& dx, Variant variant) {
  switch (layer.role()) {
    case LayerRole::kFbl:
      return fbl_forward(layer, x, *dx);
    case LayerRole::kFfbl:
      return ffbl_forward(layer, x, *dx).y;
    default:
      return project(layer, x, variant).y;
  }
}

template <typename T>
std::optional<Tensor<T>> combine_deltas(std::vector<Tensor<T>> deltas, const AdapterSpec& spec,
                                        const std::string& site) {
  if (!spec.is_ffba() || !spec.has_adapters()) return std::nullopt;
  Tensor<T> dx;
  if (spec.shared_backward) {
    dx = deltas[0];
    for (std::size_t i = 1; i < deltas.size(); ++i) {
      dx = ops::add(dx, deltas[i]);
      count_op(OpKind::kAdd, Attribution::kAdapter, site);
    }
  } else {
    dx = ops::concat_rows(std::span<const Tensor<T>>(deltas));
    count_op(OpKind::kConcat, Attribution::kAdapter, site);
  }
  if (spec.nonlinearity == Nonlinearity::kRelu) {
    dx = ops::relu(dx);
    count_op(OpKind::kActivation, Attribution::kAdapter, site);
  }
  return dx;
}

template <typename T>
Tensor<T> cache_view(const std::vector<T>& store, std::size_t kv_dim, std::size_t capacity,
                     std::size_t length) {
  std::vector<T> out(kv_dim * length);
  for (std::size_t i = 0; i < kv_dim; ++i) {
    std::copy_n(store.begin() + static_cast<std::ptrdiff_t>(i * capacity), length,
                out.begin() + static_cast<std::ptrdiff_t>(i * length));
  }
  return Tensor<T>::from_vector({kv_dim, length}, std::move(out));
}

template <typename T>
void cache_write(std::vector<T>& store, std::size_t capacity, std::size_t offset,
                 const Tensor<T>& cols) {
  auto d = cols.data();
  const std::size_t L = cols.cols();
  for (std::size_t i = 0; i < cols.rows(); ++i) {
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(i * L), L,
                store.begin() + static_cast<std::ptrdiff_t>(i * capacity + offset));
  }
}

}  // namespace

template <typename T>
Tensor<T> mha_forward(const MhaBlock<T>& b, const Tensor<T>& x, const ModelConfig& c,
                      const BlockContext& ctx, KVCache<T>* cache, std::size_t layer) {
  const Variant variant = c.adapter.normalized().variant;
  auto h = ops::rmsnorm_cols(x, b.norm, c.norm_eps);
  count_op(OpKind::kNorm, Attribution::kBase, b.site);
  auto q = project(b.q, h, variant);
  auto k = project(b.k, h, variant);
  auto v = project(b.v, h, variant);
  auto qr = ops::rope(q.y, c.head_dim(), ctx.positions, c.rope_theta);
  auto kr = ops::rope(k.y, c.head_dim(), ctx.positions, c.rope_theta);
  count_op(OpKind::kRope, Attribution::kBase, b.site);
  count_op(OpKind::kRope, Attribution::kBase, b.site);
  Tensor<T> keys = kr, vals = v.y;
  if (cache) {
    const std::size_t end = cache->length + x.cols();
    cache_write(cache->k[layer], cache->capacity, cache->length, kr);
    cache_write(cache->v[layer], cache->capacity, cache->length, v.y);
    keys = cache_view(cache->k[layer], cache->kv_dim, cache->capacity, end);
    vals = cache_view(cache->v[layer], cache->kv_dim, cache->capacity, end);
  }
  const ops::AttentionGeometry geom{c.n_heads, c.n_kv_heads, c.head_dim()};
  auto attn = ops::attention(qr, keys, vals, geom, ctx.ranges);
  count_op(OpKind::kAttention, Attribution::kBase, b.site);
  std::optional<Tensor<T>> dx;
  if (q.dy) dx = combine_deltas<T>({*q.dy, *k.dy, *v.dy}, c.adapter, b.delta_site);
  return project_out(b.o, attn, dx, variant);
}

template <typename T>
Tensor<T> ffn_forward(const FfnBlock<T>& b, const Tensor<T>& x, const ModelConfig& c) {
  const Variant variant = c.adapter.normalized().variant;
  auto h = ops::rmsnorm_cols(x, b.norm, c.norm_eps);
  count_op(OpKind::kNorm, Attribution::kBase, b.site);
  auto g = project(b.gate, h, variant);
  auto u = project(b.up, h, variant);
  auto act = ops::mul(ops::silu(g.y), u.y);
  count_op(OpKind::kActivation, Attribution::kBase, b.site);
  count_op(OpKind::kActivation, Attribution::kBase, b.site);
  std::optional<Tensor<T>> dx;
  if (g.dy) dx = combine_deltas<T>({*g.dy, *u.dy}, c.adapter, b.delta_site);
  return project_out(b.down, act, dx, variant);
}

template <typename T>
TransformerModel<T>::TransformerModel(const ModelConfig& config, std::uint64_t seed)
    : TransformerModel(config, BaseWeights<T>::random(config, seed),
                       init_adapters<T>(config, seed)) {}

template <typename T>
TransformerModel<T>::TransformerModel(const ModelConfig& config, BaseWeights<T> base,
                                      AdapterTensors<T> adapters)
    : config_(config), base_(std::move(base)), adapters_(std::move(adapters)) {
  config_.adapter = config_.adapter.normalized();
  config_.validate();
  if (base_.layers.size() != config_.n_layers) {
    throw ShapeError("base weights have " + std::to_string(base_.layers.size()) + " layers, config " +
                     std::to_string(config_.n_layers));
  }
  build_layers();
}

template <typename T>
void TransformerModel<T>::build_layers() {
  const auto layouts = projection_layouts(config_);
  std::size_t used = 0;
  auto take = [&](const std::string& name, Shape shape) -> std::optional<Tensor<T>> {
    auto it = adapters_.find(name);
    if (it == adapters_.end()) throw ConfigError("missing adapter tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("adapter tensor '" + name + "' has shape " + to_string(it->second.shape()) +
                       ", expected " + to_string(shape));
    }
    ++used;
    return it->second;
  };
  auto make = [&](const ProjectionLayout& p, const Tensor<T>& w) {
    if (w.shape() != Shape{p.out_features, p.in_features}) {
      throw ShapeError("base weight for '" + p.name + "' has shape " + to_string(w.shape()));
    }
    LayerPartitions<T> parts{w, std::nullopt, std::nullopt, std::nullopt};
    if (p.a_rows) parts.a = take(p.name + ".A", {p.a_rows, p.in_features});
    if (p.b_cols) parts.b = take(p.name + ".B", {p.out_features, p.b_cols});
    if (p.has_c) parts.c = take(p.name + ".C", {p.a_rows, p.b_cols});
    return FusedLinearLayer<T>(p.name, p.role, std::move(parts), p.shrink);
  };
  layers_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const auto& w = base_.layers[l];
    const auto* p = &layouts[l * 7];
    const std::string prefix = "layers." + std::to_string(l);
    DecoderLayer<T> layer{
        MhaBlock<T>{prefix + ".attn", prefix + ".attn.delta", w.attn_norm, make(p[0], w.wq),
                    make(p[1], w.wk), make(p[2], w.wv), make(p[3], w.wo)},
        FfnBlock<T>{prefix + ".ffn", prefix + ".ffn.delta", w.ffn_norm, make(p[4], w.wgate),
                    make(p[5], w.wup), make(p[6], w.wdown)}};
    layers_.push_back(std::move(layer));
  }
  if (used != adapters_.size()) {
    throw ConfigError("adapter set has " + std::to_string(adapters_.size() - used) +
                      " tensors not used by variant " + variant_name(config_.adapter.variant));
  }
}

template <typename T>
TransformerModel<T> TransformerModel<T>::with_adapters(const AdapterSpec& spec,
                                                       std::uint64_t seed) const {
  ModelConfig c = config_;
  c.adapter = spec;
  return TransformerModel(c, base_, init_adapters<T>(c, seed));
}

template <typename T>
TransformerModel<T> TransformerModel<T>::with_adapter_tensors(const AdapterSpec& spec,
                                                              AdapterTensors<T> adapters) const {
  ModelConfig c = config_;
  c.adapter = spec;
  return TransformerModel(c, base_, std::move(adapters));
}

template <typename T>
Tensor<T> TransformerModel<T>::run(std::span<const int> tokens,
                                   std::span<const std::size_t> positions,
                                   std::span<const ops::KeyRange> ranges, KVCache<T>* cache) const {
  auto x = ops::embedding(base_.embed, tokens);
  count_op(OpKind::kEmbedding, Attribution::kBase, "embed");
  const BlockContext ctx{positions, ranges};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    x = ops::add(x, mha_forward(layer.attn, x, config_, ctx, cache, l));
    count_op(OpKind::kAdd, Attribution::kBase, layer.attn.site);
    x = ops::add(x, ffn_forward(layer.ffn, x, config_));
    count_op(OpKind::kAdd, Attribution::kBase, layer.ffn.site);
  }
  auto h = ops::rmsnorm_cols(x, base_.final_norm, config_.norm_eps);
  count_op(OpKind::kNorm, Attribution::kBase, "head");
  auto logits = ops::matmul(base_.embed, h);
  count_op(OpKind::kPlainMatmul, Attribution::kBase, "head");
  return logits;
}

template <typename T>
Tensor<T> TransformerModel<T>::forward(const TokenBatch& batch) const {
  if (batch.size() == 0) throw ShapeError("forward: empty batch");
  return run(batch.tokens, batch.positions, batch.ranges, nullptr);
}

template <typename T>
Tensor<T> TransformerModel<T>::loss(const TokenBatch& batch) const {
  return ops::cross_entropy_cols(forward(batch), std::span<const int>(batch.targets));
}

template <typename T>
KVCache<T> TransformerModel<T>::make_cache() const {
  KVCache<T> cache;
  cache.capacity = config_.max_seq_len;
  cache.kv_dim = config_.kv_dim();
  cache.k.assign(config_.n_layers, std::vector<T>(cache.kv_dim * cache.capacity, T(0)));
  cache.v.assign(config_.n_layers, std::vector<T>(cache.kv_dim * cache.capacity, T(0)));
  return cache;
}

template <typename T>
Tensor<T> TransformerModel<T>::prefill(std::span<const int> prompt, KVCache<T>& cache) const {
  if (prompt.empty()) throw ShapeError("prefill: empty prompt");
  if (cache.length != 0) throw ContractError("prefill: cache already holds tokens");
  if (prompt.size() > cache.capacity) {
    throw CapacityError("prefill: prompt of " + std::to_string(prompt.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(cache.capacity));
  }
  std::vector<std::size_t> positions(prompt.size());
  std::vector<ops::KeyRange> ranges(prompt.size());
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    positions[i] = i;
    ranges[i] = {0, i + 1};
  }
  auto logits = run(prompt, positions, ranges, &cache);
  cache.length = prompt.size();
  return logits;
}

template <typename T>
Tensor<T> TransformerModel<T>::decode_step(int token, KVCache<T>& cache) const {
  if (cache.length >= cache.capacity) {
    throw CapacityError("decode_step: KV cache full at max_seq_len " +
                        std::to_string(cache.capacity));
  }
  const std::size_t pos = cache.length;
  const int tokens[] = {token};
  const std::size_t positions[] = {pos};
  const ops::KeyRange ranges[] = {{0, pos + 1}};
  auto logits = run(tokens, positions, ranges, &cache);
  cache.length = pos + 1;
  return logits;
}

template <typename T>
std::size_t argmax_column(const Tensor<T>& logits, std::size_t col) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.rows(); ++i) {
    if (logits.at(i, col) > logits.at(best, col)) best = i;
  }
  return best;
}

template <typename T>
std::vector<int> TransformerModel<T>::generate(std::span<const int> prompt, std::size_t n) const {
  NoGradScope no_grad;
  auto cache = make_cache();
  auto logits = prefill(prompt, cache);
  std::vector<int> out;
  std::size_t col = logits.cols() - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const int next = static_cast<int>(argmax_column(logits, col));
    out.push_back(next);
    if (i + 1 == n) break;
    logits = decode_step(next, cache);
    col = 0;
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> TransformerModel<T>::adapter_parameters() const {
  std::vector<NamedTensor<T>> out;
  for (const auto& [name, t] : adapters_) out.push_back({name, t});
  return out;
}

#define FLORA_INSTANTIATE_MODEL(T)                                                            \
  template struct BaseWeights<T>;                                                             \
  template AdapterTensors<T> init_adapters<T>(const ModelConfig&, std::uint64_t);             \
  template struct KVCache<T>;                                                                 \
  template Tensor<T> mha_forward(const MhaBlock<T>&, const Tensor<T>&, const ModelConfig&,    \
                                 const BlockContext&, KVCache<T>*, std::size_t);              \
  template Tensor<T> ffn_forward(const FfnBlock<T>&, const Tensor<T>&, const ModelConfig&);   \
  template std::size_t argmax_column(const Tensor<T>&, std::size_t);                          \
  template class TransformerModel<T>;

FLORA_INSTANTIATE_MODEL(float)
FLORA_INSTANTIATE_MODEL(double)

#undef FLORA_INSTANTIATE_MODEL

}  // namespace flora
