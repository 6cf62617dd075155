// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/adapters.hpp"

#include <algorithm>
#include <array>

#include "flora/op_counter.hpp"
#include "flora/ops.hpp"
#include "flora/tape.hpp"

namespace flora {

namespace {

constexpr std::array<Variant, 8> kVariants = {
    Variant::kNone,   Variant::kLora,     Variant::kPfLora,    Variant::kFfa,
    Variant::kFfbaAB, Variant::kFfbaAorB, Variant::kFfbaQgAdd, Variant::kFpa};

constexpr std::array<Projection, 7> kProjections = {
    Projection::kQuery, Projection::kKey, Projection::kValue, Projection::kOutput,
    Projection::kGate,  Projection::kUp,  Projection::kDown};

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kNone: return "none";
    case Variant::kLora: return "lora";
    case Variant::kPfLora: return "pf_lora";
    case Variant::kFfa: return "ffa";
    case Variant::kFfbaAB: return "ffba_ab";
    case Variant::kFfbaAorB: return "ffba_aorb";
    case Variant::kFfbaQgAdd: return "ffba_qg_add";
    case Variant::kFpa: return "fpa";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : kVariants) {
    if (name == variant_name(v)) return v;
  }
  throw ConfigError("unknown adapter variant '" + name + "'");
}

std::span<const Variant> all_variants() { return kVariants; }

const char* nonlinearity_name(Nonlinearity n) {
  return n == Nonlinearity::kRelu ? "relu" : "identity";
}

Nonlinearity parse_nonlinearity(const std::string& name) {
  if (name == "identity") return Nonlinearity::kIdentity;
  if (name == "relu") return Nonlinearity::kRelu;
  throw ConfigError("unknown nonlinearity '" + name + "'");
}

const char* projection_name(Projection p) {
  switch (p) {
    case Projection::kQuery: return "query";
    case Projection::kKey: return "key";
    case Projection::kValue: return "value";
    case Projection::kOutput: return "output";
    case Projection::kGate: return "gate";
    case Projection::kUp: return "up";
    case Projection::kDown: return "down";
  }
  return "unknown";
}

Projection parse_projection(const std::string& name) {
  for (Projection p : kProjections) {
    if (name == projection_name(p)) return p;
  }
  throw ConfigError("unknown projection '" + name + "'");
}

std::span<const Projection> all_projections() { return kProjections; }

AdapterSpec AdapterSpec::preset(Variant variant, std::size_t rank) {
  AdapterSpec spec;
  spec.variant = variant;
  spec.rank = rank;
  if (variant == Variant::kFfbaQgAdd) spec.add_set = {Projection::kQuery, Projection::kGate};
  return spec;
}

bool AdapterSpec::is_ffba() const {
  return variant == Variant::kFfbaAB || variant == Variant::kFfbaAorB ||
         variant == Variant::kFfbaQgAdd || variant == Variant::kFpa;
}

std::size_t AdapterSpec::forward_rank() const {
  return variant == Variant::kFfa ? 2 * rank : rank;
}

AdapterSpec AdapterSpec::normalized() const {
  if (rank > 0 && variant != Variant::kNone) return *this;
  return AdapterSpec{};
}

void AdapterSpec::validate() const {
  if (variant != Variant::kNone && rank == 0) {
    throw ConfigError(std::string("adapter.rank must be >= 1 for variant ") + variant_name(variant));
  }
  for (Projection p : add_set) {
    if (p == Projection::kOutput || p == Projection::kDown) {
      throw ConfigError(std::string("adapter.add_set may not contain '") + projection_name(p) +
                        "' (only query, key, value, gate, up carry a forward-only adapter)");
    }
  }
  const bool add_capable = variant == Variant::kFfbaAB || variant == Variant::kFfbaAorB ||
                           variant == Variant::kFfbaQgAdd;
  if (!add_set.empty() && !add_capable) {
    throw ConfigError(std::string("adapter.add_set must be empty for variant ") +
                      variant_name(variant));
  }
  if (nonlinearity == Nonlinearity::kRelu && !is_ffba()) {
    throw ConfigError(std::string("adapter.nonlinearity relu needs a shared-backward variant, not ") +
                      variant_name(variant));
  }
  if (use_c && variant != Variant::kFfbaAB) {
    throw ConfigError("adapter.use_c is only defined for ffba_ab");
  }
  if (!shared_backward && !is_ffba()) {
    throw ConfigError("adapter.shared_backward=false is only defined for ffba variants and fpa");
  }
}

const char* layer_role_name(LayerRole role) {
  switch (role) {
    case LayerRole::kPlain: return "plain";
    case LayerRole::kLora: return "lora";
    case LayerRole::kFfl: return "ffl";
    case LayerRole::kFbl: return "fbl";
    case LayerRole::kFfbl: return "ffbl";
  }
  return "unknown";
}

template <typename T>
FusedLinearLayer<T>::FusedLinearLayer(std::string name, LayerRole role, LayerPartitions<T> parts,
                                      bool shrink)
    : name_(std::move(name)), role_(role), parts_(std::move(parts)), shrink_(shrink) {
  const auto where = [&] { return "layer '" + name_ + "' (" + layer_role_name(role_) + ")"; };
  if (!parts_.weight.defined() || parts_.weight.rank() != 2) {
    throw ShapeError(where() + ": weight must be a matrix");
  }
  const bool has_a = parts_.a.has_value(), has_b = parts_.b.has_value(), has_c = parts_.c.has_value();
  bool ok = false;
  switch (role_) {
    case LayerRole::kPlain: ok = !has_a && !has_b && !has_c; break;
    case LayerRole::kLora: ok = has_a && has_b && !has_c; break;
    case LayerRole::kFfl: ok = has_a && !has_b && !has_c; break;
    case LayerRole::kFbl: ok = !has_a && has_b && !has_c; break;
    case LayerRole::kFfbl: ok = has_a && has_b; break;
  }
  if (!ok) throw ConfigError(where() + ": partitions do not match the role");
  const std::size_t d_o = out_features(), d_i = in_features();
  if (has_a && (parts_.a->rank() != 2 || parts_.a->cols() != d_i)) {
    throw ShapeError(where() + ": A " + to_string(parts_.a->shape()) + " must have " +
                     std::to_string(d_i) + " columns");
  }
  if (has_b && (parts_.b->rank() != 2 || parts_.b->rows() != d_o)) {
    throw ShapeError(where() + ": B " + to_string(parts_.b->shape()) + " must have " +
                     std::to_string(d_o) + " rows");
  }
  if (role_ == LayerRole::kLora && parts_.b->cols() != parts_.a->rows()) {
    throw ShapeError(where() + ": B columns must equal A rows");
  }
  if (has_c && (parts_.c->rank() != 2 || parts_.c->rows() != parts_.a->rows() ||
                parts_.c->cols() != parts_.b->cols())) {
    throw ShapeError(where() + ": C " + to_string(parts_.c->shape()) + " must be " +
                     std::to_string(parts_.a->rows()) + "x" + std::to_string(parts_.b->cols()));
  }
  if (shrink_) {
    if (!has_a) throw ConfigError(where() + ": shrink needs a forward adapter");
    if (d_o % parts_.a->rows() != 0) {
      throw PreconditionError(where() + ": forward rank " + std::to_string(parts_.a->rows()) +
                              " does not divide output dimension " + std::to_string(d_o));
    }
  }
}

template <typename T>
std::vector<NamedTensor<T>> FusedLinearLayer<T>::adapter_tensors() const {
  std::vector<NamedTensor<T>> out;
  if (parts_.a) out.push_back({name_ + ".A", *parts_.a});
  if (parts_.b) out.push_back({name_ + ".B", *parts_.b});
  if (parts_.c) out.push_back({name_ + ".C", *parts_.c});
  return out;
}

template <typename T>
const Tensor<T>& FusedLinearLayer<T>::fused_weight() const {
  const std::array<std::uint64_t, 4> versions = {
      parts_.weight.version(), parts_.a ? parts_.a->version() + 1 : 0,
      parts_.b ? parts_.b->version() + 1 : 0, parts_.c ? parts_.c->version() + 1 : 0};
  if (!fused_cache_.defined() || versions != cache_versions_) {
    NoGradScope no_grad;
    fused_cache_ = assemble_fused_weight(*this).detach();
    cache_versions_ = versions;
  }
  return fused_cache_;
}

template class FusedLinearLayer<float>;
template class FusedLinearLayer<double>;

namespace {

template <typename T>
bool partitions_tracked(const FusedLinearLayer<T>& layer) {
  const auto& p = layer.partitions();
  return p.weight.tracked() || (p.a && p.a->tracked()) || (p.b && p.b->tracked()) ||
         (p.c && p.c->tracked());
}

// The stacked weight to multiply with: differentiable assembly while
// recording gradients, the cached layout otherwise.
template <typename T>
Tensor<T> stacked_weight(const FusedLinearLayer<T>& layer) {
  if (active_tape() && partitions_tracked(layer)) return assemble_fused_weight(layer);
  return layer.fused_weight();
}

template <typename T>
void require_role(const FusedLinearLayer<T>& layer, LayerRole role, const char* op) {
  if (layer.role() != role) {
    throw ConfigError(std::string(op) + ": layer '" + layer.name() + "' has role " +
                      layer_role_name(layer.role()) + ", expected " + layer_role_name(role));
  }
}

template <typename T>
void require_input(const FusedLinearLayer<T>& layer, const Tensor<T>& x, const char* op) {
  if (x.rank() != 2 || x.rows() != layer.in_features()) {
    throw ShapeError(std::string(op) + ": layer '" + layer.name() + "' expects " +
                     std::to_string(layer.in_features()) + " input rows, got " +
                     to_string(x.shape()));
  }
}

template <typename T>
void require_augmented(const FusedLinearLayer<T>& layer, const Tensor<T>& x, const Tensor<T>& dx,
                       const char* op) {
  require_input(layer, x, op);
  if (dx.rank() != 2 || dx.rows() != layer.backward_rank() || dx.cols() != x.cols()) {
    throw ShapeError(std::string(op) + ": layer '" + layer.name() + "' expects augmented input " +
                     std::to_string(layer.backward_rank()) + "x" + std::to_string(x.cols()) +
                     ", got " + to_string(dx.shape()));
  }
}

template <typename T>
FusedOutput<T> split_output(const FusedLinearLayer<T>& layer, const Tensor<T>& stacked) {
  const std::size_t d_o = layer.out_features();
  count_op(OpKind::kSplit, Attribution::kAdapter, layer.name());
  return {ops::slice_rows(stacked, 0, d_o), ops::slice_rows(stacked, d_o, stacked.rows())};
}

template <typename T>
FusedOutput<T> maybe_shrink(const FusedLinearLayer<T>& layer, FusedOutput<T> out) {
  if (layer.shrink()) {
    out.y = ops::repeat_add(out.y, out.dy);
    count_op(OpKind::kRepeatAdd, Attribution::kAdapter, layer.name());
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> plain_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x) {
  require_input(layer, x, "plain_forward");
  count_op(OpKind::kPlainMatmul, Attribution::kBase, layer.name());
  return ops::matmul(layer.weight(), x);
}

template <typename T>
Tensor<T> lora_naive_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x) {
  require_role(layer, LayerRole::kLora, "lora_naive_forward");
  require_input(layer, x, "lora_naive_forward");
  const auto& site = layer.name();
  auto base = ops::matmul(layer.weight(), x);
  count_op(OpKind::kPlainMatmul, Attribution::kBase, site);
  auto ax = ops::matmul(*layer.a(), x);
  count_op(OpKind::kSmallMatmul, Attribution::kAdapter, site);
  auto bax = ops::matmul(*layer.b(), ax);
  count_op(OpKind::kSmallMatmul, Attribution::kAdapter, site);
  auto z = ops::add(base, bax);
  count_op(OpKind::kAdd, Attribution::kAdapter, site);
  return z;
}

template <typename T>
Tensor<T> pf_lora_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x) {
  require_role(layer, LayerRole::kLora, "pf_lora_forward");
  require_input(layer, x, "pf_lora_forward");
  const auto& site = layer.name();
  auto stacked = ops::matmul(stacked_weight(layer), x);
  count_op(OpKind::kFusedMatmul, Attribution::kBase, site);
  auto [y, dy] = split_output(layer, stacked);
  auto dz = ops::matmul(*layer.b(), dy);
  count_op(OpKind::kSmallMatmul, Attribution::kAdapter, site);
  auto z = ops::add(y, dz);
  count_op(OpKind::kAdd, Attribution::kAdapter, site);
  return z;
}

template <typename T>
FusedOutput<T> ffl_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x) {
  require_role(layer, LayerRole::kFfl, "ffl_forward");
  require_input(layer, x, "ffl_forward");
  auto stacked = ops::matmul(stacked_weight(layer), x);
  count_op(OpKind::kFusedMatmul, Attribution::kBase, layer.name());
  return maybe_shrink(layer, split_output(layer, stacked));
}

template <typename T>
Tensor<T> ffa_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x) {
  require_role(layer, LayerRole::kFfl, "ffa_forward");
  if (!layer.shrink()) {
    throw ConfigError("ffa_forward: layer '" + layer.name() + "' is not configured to repeat-and-add");
  }
  return ffl_forward(layer, x).y;
}

template <typename T>
FusedOutput<T> ffbl_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x,
                            const Tensor<T>& dx) {
  require_role(layer, LayerRole::kFfbl, "ffbl_forward");
  require_augmented(layer, x, dx, "ffbl_forward");
  auto input = ops::concat_rows({x, dx});
  count_op(OpKind::kConcat, Attribution::kAdapter, layer.name());
  auto stacked = ops::matmul(stacked_weight(layer), input);
  count_op(OpKind::kFusedMatmul, Attribution::kBase, layer.name());
  return maybe_shrink(layer, split_output(layer, stacked));
}

template <typename T>
Tensor<T> fbl_forward(const FusedLinearLayer<T>& layer, const Tensor<T>& x, const Tensor<T>& dx) {
  require_role(layer, LayerRole::kFbl, "fbl_forward");
  require_augmented(layer, x, dx, "fbl_forward");
  auto input = ops::concat_rows({x, dx});
  count_op(OpKind::kConcat, Attribution::kAdapter, layer.name());
  auto y = ops::matmul(stacked_weight(layer), input);
  count_op(OpKind::kFusedMatmul, Attribution::kBase, layer.name());
  return y;
}

template <typename T>
Tensor<T> assemble_fused_weight(const FusedLinearLayer<T>& layer) {
  const auto& p = layer.partitions();
  switch (layer.role()) {
    case LayerRole::kPlain:
      return p.weight;
    case LayerRole::kLora:
    case LayerRole::kFfl:
      return ops::concat_rows({p.weight, *p.a});
    case LayerRole::kFbl:
      return ops::concat_cols({p.weight, *p.b});
    case LayerRole::kFfbl: {
      auto corner = p.c ? *p.c : Tensor<T>::zeros({p.a->rows(), p.b->cols()});
      auto top = ops::concat_cols({p.weight, *p.b});
      auto bottom = ops::concat_cols({*p.a, corner});
      return ops::concat_rows({top, bottom});
    }
  }
  throw ConfigError("assemble_fused_weight: unknown role");
}

namespace {

template <typename T>
Tensor<T> copy_block(const Tensor<T>& src, std::size_t row0, std::size_t rows, std::size_t col0,
                     std::size_t cols) {
  std::vector<T> out(rows * cols);
  auto s = src.data();
  const std::size_t stride = src.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(s.begin() + static_cast<std::ptrdiff_t>((row0 + i) * stride + col0), cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  return Tensor<T>::from_vector({rows, cols}, std::move(out));
}

}  // namespace

template <typename T>
LayerPartitions<T> disassemble_fused_weight(const Tensor<T>& fused, LayerRole role,
                                            const PartitionDims& d) {
  std::size_t rows = d.out_features, cols = d.in_features;
  if (role == LayerRole::kLora || role == LayerRole::kFfl || role == LayerRole::kFfbl) {
    rows += d.forward_rank;
  }
  if (role == LayerRole::kFbl || role == LayerRole::kFfbl) cols += d.backward_rank;
  if (fused.rank() != 2 || fused.rows() != rows || fused.cols() != cols) {
    throw ShapeError("disassemble_fused_weight: " + to_string(fused.shape()) + " does not match " +
                     layer_role_name(role) + " layout " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  LayerPartitions<T> out;
  out.weight = copy_block(fused, 0, d.out_features, 0, d.in_features);
  switch (role) {
    case LayerRole::kPlain:
      break;
    case LayerRole::kLora:
    case LayerRole::kFfl:
      out.a = copy_block(fused, d.out_features, d.forward_rank, 0, d.in_features);
      break;
    case LayerRole::kFbl:
      out.b = copy_block(fused, 0, d.out_features, d.in_features, d.backward_rank);
      break;
    case LayerRole::kFfbl:
      out.b = copy_block(fused, 0, d.out_features, d.in_features, d.backward_rank);
      out.a = copy_block(fused, d.out_features, d.forward_rank, 0, d.in_features);
      if (d.has_c) {
        out.c = copy_block(fused, d.out_features, d.forward_rank, d.in_features, d.backward_rank);
      }
      break;
  }
  return out;
}

#define FLORA_INSTANTIATE_ADAPTERS(T)                                                          \
  template Tensor<T> plain_forward(const FusedLinearLayer<T>&, const Tensor<T>&);              \
  template Tensor<T> lora_naive_forward(const FusedLinearLayer<T>&, const Tensor<T>&);         \
  template Tensor<T> pf_lora_forward(const FusedLinearLayer<T>&, const Tensor<T>&);            \
  template Tensor<T> ffa_forward(const FusedLinearLayer<T>&, const Tensor<T>&);                \
  template FusedOutput<T> ffl_forward(const FusedLinearLayer<T>&, const Tensor<T>&);           \
  template FusedOutput<T> ffbl_forward(const FusedLinearLayer<T>&, const Tensor<T>&,           \
                                       const Tensor<T>&);                                      \
  template Tensor<T> fbl_forward(const FusedLinearLayer<T>&, const Tensor<T>&,                 \
                                 const Tensor<T>&);                                            \
  template Tensor<T> assemble_fused_weight(const FusedLinearLayer<T>&);                        \
  template LayerPartitions<T> disassemble_fused_weight(const Tensor<T>&, LayerRole,            \
                                                       const PartitionDims&);

FLORA_INSTANTIATE_ADAPTERS(float)
FLORA_INSTANTIATE_ADAPTERS(double)

#undef FLORA_INSTANTIATE_ADAPTERS

}  // namespace flora
