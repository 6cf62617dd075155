// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Llama-shaped decoder: grouped-query attention with rotary embeddings,
// SwiGLU FFN, RMSNorm, tied input/output embeddings and greedy decoding with
// a KV cache. Adapters attach to the seven projections of every layer.
//
// For the shared-backward variants the forward adapters of a block feed one
// backward adapter fused into the block's last projection:
//
//   attention:  dx_o    = dY_q + dY_k + dY_v      -> [W_o B_o] [x; dx_o]
//   ffn:        dx_down = dY_gate + dY_up         -> [W_d B_d] [x; dx_down]
//
// The delta path skips rotary, softmax and the SwiGLU product.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flora/adapters.hpp"
#include "flora/ops.hpp"
#include "flora/tensor.hpp"

namespace flora {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  AdapterSpec adapter;

  static ModelConfig toy();
  // d_model 512 model used for latency measurements.
  static ModelConfig bench();
  static ModelConfig llama1b();
  static ModelConfig llama3b();
  // "toy", "bench", "llama1b", "llama3b".
  static ModelConfig preset(const std::string& name);

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t kv_dim() const { return n_kv_heads * head_dim(); }

  // Checks the head geometry and that every repeat-and-add target divides.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Static description of one adapted projection.
struct ProjectionLayout {
  std::string name;  // e.g. "layers.0.attn.q"
  std::size_t layer = 0;
  Projection projection = Projection::kQuery;
  std::size_t out_features = 0;
  std::size_t in_features = 0;
  LayerRole role = LayerRole::kPlain;
  bool shrink = false;
  std::size_t a_rows = 0;  // 0 when absent
  std::size_t b_cols = 0;  // 0 when absent
  bool has_c = false;
  bool a_zero_init = false;

  std::size_t adapter_params() const;
};

std::vector<ProjectionLayout> projection_layouts(const ModelConfig& config);
std::string projection_site(std::size_t layer, Projection p);

struct ParamCount {
  std::uint64_t trainable = 0;
  std::uint64_t total = 0;
  // Trainable parameters of each layer.
  std::vector<std::uint64_t> per_layer;
  // Trainable parameters of one layer, keyed by projection name.
  std::map<std::string, std::uint64_t> per_projection;
};

// Closed form, cross-checked against projection_layouts(); throws
// ContractError if the two disagree.
ParamCount param_count(const ModelConfig& config);
// Closed form only.
std::uint64_t closed_form_trainable(const ModelConfig& config);
std::uint64_t base_param_count(const ModelConfig& config);

// Packed sequences. Column j of the batch is token tokens[j] at position
// positions[j]; it attends to the key columns in ranges[j].
struct TokenBatch {
  std::vector<int> tokens;
  std::vector<int> targets;  // -1 = unsupervised
  std::vector<std::size_t> positions;
  std::vector<ops::KeyRange> ranges;

  // Appends a causal sequence. targets may be empty (all -1).
  void append(std::span<const int> seq, std::span<const int> seq_targets = {});
  std::size_t size() const { return tokens.size(); }
};

template <typename T>
struct BaseWeights {
  Tensor<T> embed;  // [vocab x d_model], also the output head
  Tensor<T> final_norm;
  struct Layer {
    Tensor<T> attn_norm, wq, wk, wv, wo;
    Tensor<T> ffn_norm, wgate, wup, wdown;
  };
  std::vector<Layer> layers;

  static BaseWeights random(const ModelConfig& config, std::uint64_t seed);
  std::vector<NamedTensor<T>> named() const;
  void set_trainable(bool on);
  std::uint64_t hash() const;
};

template <typename T>
using AdapterTensors = std::map<std::string, Tensor<T>>;

// Trainable adapter partitions for config.adapter, named "<site>.A|B|C".
template <typename T>
AdapterTensors<T> init_adapters(const ModelConfig& config, std::uint64_t seed);

template <typename T>
struct MhaBlock {
  std::string site;
  std::string delta_site;
  Tensor<T> norm;
  FusedLinearLayer<T> q, k, v, o;
};

template <typename T>
struct FfnBlock {
  std::string site;
  std::string delta_site;
  Tensor<T> norm;
  FusedLinearLayer<T> gate, up, down;
};

template <typename T>
struct DecoderLayer {
  MhaBlock<T> attn;
  FfnBlock<T> ffn;
};

// Per-layer key/value storage, [kv_dim x capacity] row-major.
template <typename T>
struct KVCache {
  std::size_t capacity = 0;
  std::size_t kv_dim = 0;
  std::size_t length = 0;
  std::vector<std::vector<T>> k;
  std::vector<std::vector<T>> v;

  void truncate(std::size_t n);
};

// Execution context for one block call.
struct BlockContext {
  std::span<const std::size_t> positions;
  std::span<const ops::KeyRange> ranges;
};

// x is the block input (pre-norm); returns the residual branch output.
template <typename T>
Tensor<T> mha_forward(const MhaBlock<T>& block, const Tensor<T>& x, const ModelConfig& config,
                      const BlockContext& ctx, KVCache<T>* cache = nullptr, std::size_t layer = 0);
template <typename T>
Tensor<T> ffn_forward(const FfnBlock<T>& block, const Tensor<T>& x, const ModelConfig& config);

template <typename T>
class TransformerModel {
 public:
  TransformerModel() = default;
  // Base weights and adapters both derived from seed (independent streams).
  TransformerModel(const ModelConfig& config, std::uint64_t seed);
  TransformerModel(const ModelConfig& config, BaseWeights<T> base, AdapterTensors<T> adapters);

  // Same base tensors (shared storage), fresh adapters for `spec`.
  TransformerModel with_adapters(const AdapterSpec& spec, std::uint64_t seed) const;
  // Same base tensors, caller-provided adapters.
  TransformerModel with_adapter_tensors(const AdapterSpec& spec, AdapterTensors<T> adapters) const;

  const ModelConfig& config() const { return config_; }
  const BaseWeights<T>& base() const { return base_; }
  const AdapterTensors<T>& adapters() const { return adapters_; }
  const std::vector<DecoderLayer<T>>& layers() const { return layers_; }

  // Logits [vocab x batch.size()].
  Tensor<T> forward(const TokenBatch& batch) const;
  // Mean cross entropy over supervised columns.
  Tensor<T> loss(const TokenBatch& batch) const;

  KVCache<T> make_cache() const;
  // Consumes the prompt into an empty cache; returns logits of every
  // prompt position.
  Tensor<T> prefill(std::span<const int> prompt, KVCache<T>& cache) const;
  // One autoregressive step; throws CapacityError when the cache is full.
  Tensor<T> decode_step(int token, KVCache<T>& cache) const;
  // Greedy continuation of `prompt` by n tokens.
  std::vector<int> generate(std::span<const int> prompt, std::size_t n) const;

  std::vector<NamedTensor<T>> adapter_parameters() const;

 private:
  void build_layers();
  Tensor<T> run(std::span<const int> tokens, std::span<const std::size_t> positions,
                std::span<const ops::KeyRange> ranges, KVCache<T>* cache) const;

  ModelConfig config_;
  BaseWeights<T> base_;
  AdapterTensors<T> adapters_;
  std::vector<DecoderLayer<T>> layers_;
};

template <typename T>
std::size_t argmax_column(const Tensor<T>& logits, std::size_t col);

extern template class TransformerModel<float>;
extern template class TransformerModel<double>;

}  // namespace flora
