// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adapter variants and fused projection layers.
//
// A projection owns a frozen base weight W [d_o x d_i] plus optional
// trainable partitions: a forward adapter A [r_f x d_i], a backward adapter
// B [d_o x r_b] and a corner block C [r_f x r_b]. The fused layouts are
//
//   lora / ffl   [W; A] x                  -> (y, dy)
//   fbl          [W  B] [x; dx]            -> y
//   ffbl         [W  B; A  C] [x; dx]      -> (y, dy)
//
// with an optional shrink y <- repeat_add(y, dy) on layers whose forward
// output is folded back into the base path.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flora/tensor.hpp"

namespace flora {

enum class Variant { kNone, kLora, kPfLora, kFfa, kFfbaAB, kFfbaAorB, kFfbaQgAdd, kFpa };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);
std::span<const Variant> all_variants();

enum class Nonlinearity { kIdentity, kRelu };

const char* nonlinearity_name(Nonlinearity n);
Nonlinearity parse_nonlinearity(const std::string& name);

enum class Projection { kQuery, kKey, kValue, kOutput, kGate, kUp, kDown };

const char* projection_name(Projection p);
Projection parse_projection(const std::string& name);
std::span<const Projection> all_projections();

struct AdapterSpec {
  Variant variant = Variant::kNone;
  std::size_t rank = 0;
  Nonlinearity nonlinearity = Nonlinearity::kIdentity;
  // Forward-adapter projections whose output is repeat-added into their own
  // base output. Only meaningful for the ffba_* variants.
  std::set<Projection> add_set;
  // ffba_ab only: output/down layers also carry the C corner block.
  bool use_c = false;
  // One backward adapter per block fed by the summed forward outputs. When
  // false the forward outputs are stacked and B grows to one slice each.
  bool shared_backward = true;

  // Canonical settings for a variant (e.g. ffba_qg_add -> {query, gate}).
  static AdapterSpec preset(Variant variant, std::size_t rank);

  void validate() const;
  bool has_adapters() const { return variant != Variant::kNone && rank > 0; }
  bool is_ffba() const;
  // Rows of each forward adapter: 2r for ffa, r otherwise.
  std::size_t forward_rank() const;
  // rank == 0 is treated as "no adapters".
  AdapterSpec normalized() const;

  bool operator==(const AdapterSpec&) const = default;
};

enum class LayerRole { kPlain, kLora, kFfl, kFbl, kFfbl };

const char* layer_role_name(LayerRole role);

template <typename T>
struct LayerPartitions {
  Tensor<T> weight;
  std::optional<Tensor<T>> a;
  std::optional<Tensor<T>> b;
  std::optional<Tensor<T>> c;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class FusedLinearLayer {
 public:
  FusedLinearLayer() = default;
  // Checks the role/partition invariants and all partition shapes.
  FusedLinearLayer(std::string name, LayerRole role, LayerPartitions<T> parts, bool shrink = false);

  const std::string& name() const { return name_; }
  LayerRole role() const { return role_; }
  bool shrink() const { return shrink_; }
  std::size_t in_features() const { return parts_.weight.cols(); }
  std::size_t out_features() const { return parts_.weight.rows(); }
  std::size_t forward_rank() const { return parts_.a ? parts_.a->rows() : 0; }
  std::size_t backward_rank() const { return parts_.b ? parts_.b->cols() : 0; }

  const Tensor<T>& weight() const { return parts_.weight; }
  const std::optional<Tensor<T>>& a() const { return parts_.a; }
  const std::optional<Tensor<T>>& b() const { return parts_.b; }
  const std::optional<Tensor<T>>& c() const { return parts_.c; }
  const LayerPartitions<T>& partitions() const { return parts_; }

  // "<name>.A", "<name>.B", "<name>.C" for the partitions present.
  std::vector<NamedTensor<T>> adapter_tensors() const;

  // Assembled layout for the role, rebuilt lazily whenever a partition's
  // storage version changes. Untracked; use assemble_fused_weight() when
  // gradients must reach the partitions.
  const Tensor<T>& fused_weight() const;

 private:
  std::string name_;
  LayerRole role_ = LayerRole::kPlain;
  LayerPartitions<T> parts_;
  bool shrink_ = false;
  mutable Tensor<T> fused_cache_;
  mutable std::array<std::uint64_t, 4> cache_versions_{};
};

template <typename T>
struct FusedOutput {
  Tensor<T> y;
  Tensor<T> dy;
};

// W x.
template <typename T>
Tensor<T> plain_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x);

// Reference LoRA: W x, A x, B (A x) and the final add as four separate ops.
template <typename T>
Tensor<T> lora_naive_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x);

// [W; A] x in one matmul, then B dy and the add.
template <typename T>
Tensor<T> pf_lora_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x);

// [W; A] x in one matmul, then repeat_add(y, dy). A has 2r rows.
template <typename T>
Tensor<T> ffa_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x);

// Forward-only fused layer; y is shrunk when the layer is flagged.
template <typename T>
FusedOutput<T> ffl_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x);

// [W B; A C] [x; dx], C taken as zero when absent; y shrunk when flagged.
template <typename T>
FusedOutput<T> ffbl_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x,
                            const Tensor<T>& dx);

// [W B] [x; dx] = W x + B dx.
template <typename T>
Tensor<T> fbl_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x, const Tensor<T>& dx);

// Differentiable assembly of the role's stacked layout. Shapes:
// plain d_o x d_i, lora/ffl (d_o+r) x d_i, fbl d_o x (d_i+r),
// ffbl (d_o+r_f) x (d_i+r_b).
template <typename T>
Tensor<T> assemble_fused_weight(const FusedLinearLayer<T>& layer);

struct PartitionDims {
  std::size_t out_features = 0;
  std::size_t in_features = 0;
  std::size_t forward_rank = 0;   // rows of A
  std::size_t backward_rank = 0;  // columns of B
  bool has_c = false;
};

// Inverse of assemble_fused_weight (untracked copies).
template <typename T>
LayerPartitions<T> disassemble_fused_weight(const Tensor<T>& fused, LayerRole role,
                                            const PartitionDims& dims);

}  // namespace flora
