// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives over rank-2 tensors laid out as
// [features x sequence], i.e. one token per column.
//
// Every op computes its result eagerly. If a Tape is active and any input is
// tracked, the op also records how to push the output gradient back into
// its tracked inputs.

#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "flora/tensor.hpp"

namespace flora::ops {

// c[i,j] = sum_p a[i,p] * b[p,j], accumulated from zero in ascending p for
// every element regardless of shape. This fixed order is what makes a
// matmul over row-stacked weights bit-identical to the separate products.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// Vertical stack in argument order. All parts share the column count.
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> concat_rows(std::initializer_list<Tensor<T>> parts) {
  std::vector<Tensor<T>> v(parts);
  return concat_rows(std::span<const Tensor<T>>(v));
}

// Horizontal stack in argument order. All parts share the row count.
template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> concat_cols(std::initializer_list<Tensor<T>> parts) {
  std::vector<Tensor<T>> v(parts);
  return concat_cols(std::span<const Tensor<T>>(v));
}

// Rows [from, to). The result is a view onto the input's storage.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t from, std::size_t to);

// out[i,l] = y[i,l] + dy[i mod q, l]: dy is tiled block-wise ([dy; dy; ...])
// d_o / q times. Requires q to divide d_o.
template <typename T>
Tensor<T> repeat_add(const Tensor<T>& y, const Tensor<T>& dy);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// relu'(0) is taken as 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> silu(const Tensor<T>& a);

// Column-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax_cols(const Tensor<T>& a);

// y[:,l] = x[:,l] / sqrt(mean(x[:,l]^2) + eps) * gain. gain has one entry
// per row of x.
template <typename T>
Tensor<T> rmsnorm_cols(const Tensor<T>& x, const Tensor<T>& gain, double eps);

// Rotary position embedding over heads of size head_dim stacked along the
// rows, rotating the pairs (i, i + head_dim/2) of each head by
// position * theta^(-2i/head_dim).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::size_t head_dim, std::span<const std::size_t> positions,
               double theta);

struct AttentionGeometry {
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;
};

// Keys visible to one query column: columns [begin, end) of k and v.
struct KeyRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Grouped-query scaled dot-product attention. q is [n_heads*head_dim x Lq];
// k and v are [n_kv_heads*head_dim x Lk]; query column j attends to the key
// columns in ranges[j]. Returns [n_heads*head_dim x Lq].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionGeometry& geometry, std::span<const KeyRange> ranges);

// Gathers table rows (one per token) into columns: [d x L] from [V x d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> tokens);

// Mean next-token cross entropy over the columns whose target is >= 0.
template <typename T>
Tensor<T> cross_entropy_cols(const Tensor<T>& logits, std::span<const int> targets);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

namespace kernel {
// Raw row-major c = a * b with the accumulation order documented on matmul.
template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);
}  // namespace kernel

}  // namespace flora::ops
