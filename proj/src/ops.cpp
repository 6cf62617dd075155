// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flora/tape.hpp"

namespace flora::ops {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

template <typename T>
Tape* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->tracked()) return tape;
  }
  return nullptr;
}

template <typename T>
Tape* recording_tape(std::span<const Tensor<T>> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const auto& t : inputs) {
    if (t.tracked()) return tape;
  }
  return nullptr;
}

template <typename T>
void mark_tracked(const Tensor<T>& out) {
  out.node()->tracked = true;
}

template <typename T>
void accumulate(detail::TensorNode<T>& node, const T* src) {
  if (!node.tracked) return;
  T* g = node.grad_accumulator();
  const std::size_t n = node.numel();
  for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

}  // namespace

namespace kernel {

namespace {

// Rows [0, m) and columns [j0, n) of C = A B, row by row.
template <typename T>
void gemm_rows(std::size_t m, std::size_t k, std::size_t n, std::size_t j0, const T* a,
               const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    std::fill(crow + j0, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  if (n == 1) {
    // Matrix-vector: eight independent row accumulators, each still summing
    // in ascending p.
    std::size_t i = 0;
    for (; i + 8 <= m; i += 8) {
      const T* r = a + i * k;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T x = b[p];
        s0 += r[p] * x;
        s1 += r[k + p] * x;
        s2 += r[2 * k + p] * x;
        s3 += r[3 * k + p] * x;
        s4 += r[4 * k + p] * x;
        s5 += r[5 * k + p] * x;
        s6 += r[6 * k + p] * x;
        s7 += r[7 * k + p] * x;
      }
      c[i] = s0;
      c[i + 1] = s1;
      c[i + 2] = s2;
      c[i + 3] = s3;
      c[i + 4] = s4;
      c[i + 5] = s5;
      c[i + 6] = s6;
      c[i + 7] = s7;
    }
    for (; i < m; ++i) {
      const T* r = a + i * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += r[p] * b[p];
      c[i] = s;
    }
    return;
  }
  // Register tiles of kRows x kCols outputs. Every output is still one
  // accumulator summed in ascending p from zero, as in the triple loop.
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 256 / sizeof(T);
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    std::size_t j = 0;
    for (; j + kCols <= n; j += kCols) {
      T acc[kRows][kCols] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n + j;
        for (std::size_t r = 0; r < kRows; ++r) {
          const T av = a[(i + r) * k + p];
          for (std::size_t q = 0; q < kCols; ++q) acc[r][q] += av * brow[q];
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        std::copy(acc[r], acc[r] + kCols, c + (i + r) * n + j);
      }
    }
    if (j < n) gemm_rows(kRows, k, n, j, a + i * k, b, c + i * n);
  }
  if (i < m) gemm_rows(m - i, k, n, 0, a + i * k, b, c + i * n);
}

template void gemm(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);

}  // namespace kernel

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ for " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  auto out = Tensor<T>::zeros({m, n});
  kernel::gemm(m, k, n, a.data().data(), b.data().data(), out.mutable_data().data());
  if (Tape* tape = recording_tape<T>({&a, &b})) {
    mark_tracked(out);
    tape->record("matmul", [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
      if (on->grad.empty()) return;
      const T* dc = on->grad.data();
      if (an->tracked) {
        // dA = dC * B^T
        std::vector<T> bt(k * n), da(m * k);
        transpose_into(k, n, bn->values(), bt.data());
        kernel::gemm(m, n, k, dc, bt.data(), da.data());
        accumulate(*an, da.data());
      }
      if (bn->tracked) {
        // dB = A^T * dC
        std::vector<T> at(k * m), db(k * n);
        transpose_into(m, k, an->values(), at.data());
        kernel::gemm(k, m, n, at.data(), dc, db.data());
        accumulate(*bn, db.data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  auto out = Tensor<T>::zeros({c, r});
  transpose_into(r, c, a.data().data(), out.mutable_data().data());
  if (Tape* tape = recording_tape<T>({&a})) {
    mark_tracked(out);
    tape->record("transpose", [an = a.node(), on = out.node(), r, c] {
      if (on->grad.empty()) return;
      std::vector<T> g(r * c);
      transpose_into(c, r, on->grad.data(), g.data());
      accumulate(*an, g.data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  for (const auto& p : parts) require_matrix(p, "concat_rows");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column count mismatch " + to_string(parts.front().shape()) +
                       " vs " + to_string(p.shape()));
    }
    rows += p.rows();
  }
  auto out = Tensor<T>::zeros({rows, cols});
  auto dst = out.mutable_data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto src = p.data();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += src.size();
  }
  if (Tape* tape = recording_tape<T>(parts)) {
    mark_tracked(out);
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record("concat_rows", [nodes = std::move(nodes), on = out.node()] {
      if (on->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& n : nodes) {
        accumulate(*n, on->grad.data() + off);
        off += n->numel();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  for (const auto& p : parts) require_matrix(p, "concat_cols");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row count mismatch " + to_string(parts.front().shape()) +
                       " vs " + to_string(p.shape()));
    }
    cols += p.cols();
  }
  auto out = Tensor<T>::zeros({rows, cols});
  auto dst = out.mutable_data();
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    auto src = p.data();
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                  dst.begin() + static_cast<std::ptrdiff_t>(i * cols + col0));
    }
    col0 += pc;
  }
  if (Tape* tape = recording_tape<T>(parts)) {
    mark_tracked(out);
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record("concat_cols", [nodes = std::move(nodes), on = out.node(), rows, cols] {
      if (on->grad.empty()) return;
      std::size_t c0 = 0;
      for (const auto& n : nodes) {
        const std::size_t pc = n->shape[1];
        if (n->tracked) {
          T* g = n->grad_accumulator();
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += on->grad[i * cols + c0 + j];
          }
        }
        c0 += pc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t from, std::size_t to) {
  require_matrix(t, "slice_rows");
  const std::size_t rows = t.rows(), cols = t.cols();
  if (from >= to || to > rows) {
    throw BoundsError("slice_rows: range [" + std::to_string(from) + ", " + std::to_string(to) +
                      ") invalid for " + to_string(t.shape()));
  }
  auto node = std::make_shared<detail::TensorNode<T>>();
  node->buffer = t.node()->buffer;
  node->offset = t.node()->offset + from * cols;
  node->shape = {to - from, cols};
  auto out = Tensor<T>::wrap(std::move(node));
  if (Tape* tape = recording_tape<T>({&t})) {
    mark_tracked(out);
    tape->record("slice_rows", [tn = t.node(), on = out.node(), from, cols] {
      if (on->grad.empty() || !tn->tracked) return;
      T* g = tn->grad_accumulator() + from * cols;
      const std::size_t n = on->numel();
      for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> repeat_add(const Tensor<T>& y, const Tensor<T>& dy) {
  require_matrix(y, "repeat_add");
  require_matrix(dy, "repeat_add");
  const std::size_t d_o = y.rows(), q = dy.rows(), L = y.cols();
  if (dy.cols() != L) {
    throw ShapeError("repeat_add: column mismatch " + to_string(y.shape()) + " vs " +
                     to_string(dy.shape()));
  }
  if (d_o % q != 0) {
    throw PreconditionError("repeat_add: " + std::to_string(q) + " rows do not tile " +
                            std::to_string(d_o) + " output rows");
  }
  auto out = Tensor<T>::zeros({d_o, L});
  auto o = out.mutable_data();
  auto yv = y.data();
  auto dv = dy.data();
  for (std::size_t i = 0; i < d_o; ++i) {
    const T* yr = yv.data() + i * L;
    const T* dr = dv.data() + (i % q) * L;
    T* orow = o.data() + i * L;
    for (std::size_t l = 0; l < L; ++l) orow[l] = yr[l] + dr[l];
  }
  if (Tape* tape = recording_tape<T>({&y, &dy})) {
    mark_tracked(out);
    tape->record("repeat_add", [yn = y.node(), dn = dy.node(), on = out.node(), d_o, q, L] {
      if (on->grad.empty()) return;
      accumulate(*yn, on->grad.data());
      if (dn->tracked) {
        T* g = dn->grad_accumulator();
        for (std::size_t i = 0; i < d_o; ++i) {
          const T* src = on->grad.data() + i * L;
          T* dst = g + (i % q) * L;
          for (std::size_t l = 0; l < L; ++l) dst[l] += src[l];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (Tape* tape = recording_tape<T>({&a, &b})) {
    mark_tracked(out);
    tape->record("add", [an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      accumulate(*an, on->grad.data());
      accumulate(*bn, on->grad.data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (Tape* tape = recording_tape<T>({&a, &b})) {
    mark_tracked(out);
    tape->record("mul", [an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const std::size_t n = on->numel();
      const T* g = on->grad.data();
      if (an->tracked) {
        T* ga = an->grad_accumulator();
        const T* bv = bn->values();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
      }
      if (bn->tracked) {
        T* gb = bn->grad_accumulator();
        const T* av = an->values();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  if (Tape* tape = recording_tape<T>({&a})) {
    mark_tracked(out);
    tape->record("scale", [an = a.node(), on = out.node(), factor] {
      if (on->grad.empty() || !an->tracked) return;
      T* g = an->grad_accumulator();
      for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > T(0) ? av[i] : T(0);
  if (Tape* tape = recording_tape<T>({&a})) {
    mark_tracked(out);
    tape->record("relu", [an = a.node(), on = out.node()] {
      if (on->grad.empty() || !an->tracked) return;
      T* g = an->grad_accumulator();
      const T* x = an->values();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (x[i] > T(0)) g[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] / (T(1) + std::exp(-av[i]));
  if (Tape* tape = recording_tape<T>({&a})) {
    mark_tracked(out);
    tape->record("silu", [an = a.node(), on = out.node()] {
      if (on->grad.empty() || !an->tracked) return;
      T* g = an->grad_accumulator();
      const T* x = an->values();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        g[i] += on->grad[i] * s * (T(1) + x[i] * (T(1) - s));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cols(const Tensor<T>& a) {
  require_matrix(a, "softmax_cols");
  const std::size_t rows = a.rows(), cols = a.cols();
  auto out = Tensor<T>::zeros({rows, cols});
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t j = 0; j < cols; ++j) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < rows; ++i) mx = std::max(mx, x[i * cols + j]);
    T total = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      const T e = std::exp(x[i * cols + j] - mx);
      o[i * cols + j] = e;
      total += e;
    }
    for (std::size_t i = 0; i < rows; ++i) o[i * cols + j] /= total;
  }
  if (Tape* tape = recording_tape<T>({&a})) {
    mark_tracked(out);
    tape->record("softmax_cols", [an = a.node(), on = out.node(), rows, cols] {
      if (on->grad.empty() || !an->tracked) return;
      T* g = an->grad_accumulator();
      const T* p = on->values();
      const T* dy = on->grad.data();
      for (std::size_t j = 0; j < cols; ++j) {
        T dot = 0;
        for (std::size_t i = 0; i < rows; ++i) dot += p[i * cols + j] * dy[i * cols + j];
        for (std::size_t i = 0; i < rows; ++i) {
          g[i * cols + j] += p[i * cols + j] * (dy[i * cols + j] - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> rmsnorm_cols(const Tensor<T>& x, const Tensor<T>& gain, double eps) {
  require_matrix(x, "rmsnorm_cols");
  const std::size_t d = x.rows(), L = x.cols();
  if (gain.numel() != d) {
    throw ShapeError("rmsnorm_cols: gain " + to_string(gain.shape()) + " does not match " +
                     to_string(x.shape()));
  }
  auto out = Tensor<T>::zeros({d, L});
  auto o = out.mutable_data();
  auto xv = x.data();
  auto gv = gain.data();
  std::vector<T> inv(L);
  for (std::size_t l = 0; l < L; ++l) {
    T ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += xv[i * L + l] * xv[i * L + l];
    inv[l] = T(1) / std::sqrt(ss / T(d) + T(eps));
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t l = 0; l < L; ++l) o[i * L + l] = xv[i * L + l] * inv[l] * gv[i];
  }
  if (Tape* tape = recording_tape<T>({&x, &gain})) {
    mark_tracked(out);
    tape->record("rmsnorm_cols", [xn = x.node(), gn = gain.node(), on = out.node(), d, L,
                                  inv = std::move(inv)] {
      if (on->grad.empty()) return;
      const T* xv = xn->values();
      const T* gv = gn->values();
      const T* dy = on->grad.data();
      if (gn->tracked) {
        T* gg = gn->grad_accumulator();
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t l = 0; l < L; ++l) gg[i] += dy[i * L + l] * xv[i * L + l] * inv[l];
        }
      }
      if (xn->tracked) {
        T* gx = xn->grad_accumulator();
        for (std::size_t l = 0; l < L; ++l) {
          T dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += gv[i] * dy[i * L + l] * xv[i * L + l] * inv[l];
          for (std::size_t i = 0; i < d; ++i) {
            const T u = xv[i * L + l] * inv[l];
            gx[i * L + l] += inv[l] * (gv[i] * dy[i * L + l] - u * dot / T(d));
          }
        }
      }
    });
  }
  return out;
}

namespace {

// out = R(position) x for one column of one head, or R^T when inverse.
template <typename T>
void rotate_head(const T* src, T* dst, std::size_t stride, std::size_t head_dim,
                 std::size_t position, double theta, bool inverse) {
  const std::size_t half = head_dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double angle = static_cast<double>(position) * freq;
    const T c = static_cast<T>(std::cos(angle));
    const T s = inverse ? static_cast<T>(-std::sin(angle)) : static_cast<T>(std::sin(angle));
    const T x1 = src[i * stride];
    const T x2 = src[(i + half) * stride];
    dst[i * stride] = x1 * c - x2 * s;
    dst[(i + half) * stride] = x1 * s + x2 * c;
  }
}

}  // namespace

template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::size_t head_dim, std::span<const std::size_t> positions,
               double theta) {
  require_matrix(x, "rope");
  const std::size_t rows = x.rows(), L = x.cols();
  if (head_dim == 0 || head_dim % 2 != 0 || rows % head_dim != 0) {
    throw ShapeError("rope: head_dim " + std::to_string(head_dim) + " incompatible with " +
                     to_string(x.shape()));
  }
  if (positions.size() != L) {
    throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " +
                     std::to_string(L) + " columns");
  }
  const std::size_t heads = rows / head_dim;
  auto out = Tensor<T>::zeros({rows, L});
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t base = h * head_dim * L + l;
      rotate_head(xv.data() + base, o.data() + base, L, head_dim, positions[l], theta, false);
    }
  }
  if (Tape* tape = recording_tape<T>({&x})) {
    mark_tracked(out);
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    tape->record("rope", [xn = x.node(), on = out.node(), heads, head_dim, L, theta,
                          pos = std::move(pos)] {
      if (on->grad.empty() || !xn->tracked) return;
      std::vector<T> back(on->grad.size());
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t base = h * head_dim * L + l;
          rotate_head(on->grad.data() + base, back.data() + base, L, head_dim, pos[l], theta, true);
        }
      }
      accumulate(*xn, back.data());
    });
  }
  return out;
}

namespace {

// Position-major copies of the projection outputs so a head's features are
// contiguous.
template <typename T>
std::vector<T> to_position_major(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  transpose_into(rows, cols, src, out.data());
  return out;
}

template <typename T>
void attention_probs(const T* qj, const T* kt, std::size_t kv_dim, std::size_t head_offset,
                     std::size_t head_dim, KeyRange range, T scale, std::vector<T>& probs) {
  const std::size_t n = range.end - range.begin;
  probs.resize(n);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t t = 0; t < n; ++t) {
    const T* kr = kt + (range.begin + t) * kv_dim + head_offset;
    T s = 0;
    for (std::size_t d = 0; d < head_dim; ++d) s += qj[d] * kr[d];
    probs[t] = s * scale;
    mx = std::max(mx, probs[t]);
  }
  T total = 0;
  for (std::size_t t = 0; t < n; ++t) {
    probs[t] = std::exp(probs[t] - mx);
    total += probs[t];
  }
  for (std::size_t t = 0; t < n; ++t) probs[t] /= total;
}

}  // namespace

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionGeometry& g, std::span<const KeyRange> ranges) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  if (g.n_kv_heads == 0 || g.n_heads % g.n_kv_heads != 0) {
    throw ShapeError("attention: n_heads must be a multiple of n_kv_heads");
  }
  const std::size_t q_dim = g.n_heads * g.head_dim;
  const std::size_t kv_dim = g.n_kv_heads * g.head_dim;
  const std::size_t Lq = q.cols(), Lk = k.cols();
  if (q.rows() != q_dim || k.rows() != kv_dim || v.rows() != kv_dim || v.cols() != Lk) {
    throw ShapeError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                     ", v " + to_string(v.shape()) + " do not match the head geometry");
  }
  if (ranges.size() != Lq) throw ShapeError("attention: one key range per query column required");
  for (const auto& r : ranges) {
    if (r.begin >= r.end || r.end > Lk) {
      throw BoundsError("attention: key range [" + std::to_string(r.begin) + ", " +
                        std::to_string(r.end) + ") outside " + std::to_string(Lk) + " keys");
    }
  }
  const std::size_t group = g.n_heads / g.n_kv_heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(g.head_dim));

  auto qt = to_position_major(q.data().data(), q_dim, Lq);
  auto kt = to_position_major(k.data().data(), kv_dim, Lk);
  auto vt = to_position_major(v.data().data(), kv_dim, Lk);
  std::vector<T> ot(Lq * q_dim, T(0));
  std::vector<T> probs;
  for (std::size_t j = 0; j < Lq; ++j) {
    for (std::size_t h = 0; h < g.n_heads; ++h) {
      const std::size_t kvo = (h / group) * g.head_dim;
      const T* qj = qt.data() + j * q_dim + h * g.head_dim;
      attention_probs(qj, kt.data(), kv_dim, kvo, g.head_dim, ranges[j], scl, probs);
      T* oj = ot.data() + j * q_dim + h * g.head_dim;
      for (std::size_t t = 0; t < probs.size(); ++t) {
        const T* vr = vt.data() + (ranges[j].begin + t) * kv_dim + kvo;
        for (std::size_t d = 0; d < g.head_dim; ++d) oj[d] += probs[t] * vr[d];
      }
    }
  }
  auto out = Tensor<T>::zeros({q_dim, Lq});
  transpose_into(Lq, q_dim, ot.data(), out.mutable_data().data());

  if (Tape* tape = recording_tape<T>({&q, &k, &v})) {
    mark_tracked(out);
    std::vector<KeyRange> rs(ranges.begin(), ranges.end());
    tape->record("attention", [qn = q.node(), kn = k.node(), vn = v.node(), on = out.node(), g,
                               rs = std::move(rs), qt = std::move(qt), kt = std::move(kt),
                               vt = std::move(vt), q_dim, kv_dim, Lq, Lk, group, scl] {
      if (on->grad.empty()) return;
      auto dot = to_position_major(on->grad.data(), q_dim, Lq);
      std::vector<T> dqt(Lq * q_dim, T(0)), dkt(Lk * kv_dim, T(0)), dvt(Lk * kv_dim, T(0));
      std::vector<T> probs, dp;
      for (std::size_t j = 0; j < Lq; ++j) {
        for (std::size_t h = 0; h < g.n_heads; ++h) {
          const std::size_t kvo = (h / group) * g.head_dim;
          const T* qj = qt.data() + j * q_dim + h * g.head_dim;
          const T* doj = dot.data() + j * q_dim + h * g.head_dim;
          attention_probs(qj, kt.data(), kv_dim, kvo, g.head_dim, rs[j], scl, probs);
          const std::size_t n = probs.size();
          dp.assign(n, T(0));
          T weighted = 0;
          for (std::size_t t = 0; t < n; ++t) {
            const std::size_t col = rs[j].begin + t;
            const T* vr = vt.data() + col * kv_dim + kvo;
            T* dvr = dvt.data() + col * kv_dim + kvo;
            T s = 0;
            for (std::size_t d = 0; d < g.head_dim; ++d) {
              s += doj[d] * vr[d];
              dvr[d] += probs[t] * doj[d];
            }
            dp[t] = s;
            weighted += probs[t] * s;
          }
          T* dqj = dqt.data() + j * q_dim + h * g.head_dim;
          for (std::size_t t = 0; t < n; ++t) {
            const std::size_t col = rs[j].begin + t;
            const T ds = probs[t] * (dp[t] - weighted) * scl;
            const T* kr = kt.data() + col * kv_dim + kvo;
            T* dkr = dkt.data() + col * kv_dim + kvo;
            for (std::size_t d = 0; d < g.head_dim; ++d) {
              dqj[d] += ds * kr[d];
              dkr[d] += ds * qj[d];
            }
          }
        }
      }
      std::vector<T> back;
      if (qn->tracked) {
        back.resize(q_dim * Lq);
        transpose_into(Lq, q_dim, dqt.data(), back.data());
        accumulate(*qn, back.data());
      }
      if (kn->tracked) {
        back.resize(kv_dim * Lk);
        transpose_into(Lk, kv_dim, dkt.data(), back.data());
        accumulate(*kn, back.data());
      }
      if (vn->tracked) {
        back.resize(kv_dim * Lk);
        transpose_into(Lk, kv_dim, dvt.data(), back.data());
        accumulate(*vn, back.data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> tokens) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols(), L = tokens.size();
  if (L == 0) throw ShapeError("embedding: empty token sequence");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw BoundsError("embedding: token " + std::to_string(t) + " outside vocabulary of " +
                        std::to_string(vocab));
    }
  }
  auto out = Tensor<T>::zeros({d, L});
  auto o = out.mutable_data();
  auto tv = table.data();
  for (std::size_t l = 0; l < L; ++l) {
    const T* row = tv.data() + static_cast<std::size_t>(tokens[l]) * d;
    for (std::size_t i = 0; i < d; ++i) o[i * L + l] = row[i];
  }
  if (Tape* tape = recording_tape<T>({&table})) {
    mark_tracked(out);
    std::vector<int> toks(tokens.begin(), tokens.end());
    tape->record("embedding", [tn = table.node(), on = out.node(), d, L, toks = std::move(toks)] {
      if (on->grad.empty() || !tn->tracked) return;
      T* g = tn->grad_accumulator();
      for (std::size_t l = 0; l < L; ++l) {
        T* row = g + static_cast<std::size_t>(toks[l]) * d;
        for (std::size_t i = 0; i < d; ++i) row[i] += on->grad[i * L + l];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_cols(const Tensor<T>& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy_cols");
  const std::size_t V = logits.rows(), L = logits.cols();
  if (targets.size() != L) {
    throw ShapeError("cross_entropy_cols: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(L) + " columns");
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t >= 0) {
      if (static_cast<std::size_t>(t) >= V) {
        throw BoundsError("cross_entropy_cols: target " + std::to_string(t) + " outside " +
                          std::to_string(V) + " classes");
      }
      ++count;
    }
  }
  if (count == 0) throw ContractError("cross_entropy_cols: no supervised columns");
  auto x = logits.data();
  std::vector<T> lse(L, T(0));
  double total = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    if (targets[l] < 0) continue;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < V; ++i) mx = std::max(mx, x[i * L + l]);
    T s = 0;
    for (std::size_t i = 0; i < V; ++i) s += std::exp(x[i * L + l] - mx);
    lse[l] = mx + std::log(s);
    total += static_cast<double>(lse[l] - x[static_cast<std::size_t>(targets[l]) * L + l]);
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
  if (Tape* tape = recording_tape<T>({&logits})) {
    mark_tracked(out);
    std::vector<int> tg(targets.begin(), targets.end());
    tape->record("cross_entropy_cols", [ln = logits.node(), on = out.node(), V, L, count,
                                        tg = std::move(tg), lse = std::move(lse)] {
      if (on->grad.empty() || !ln->tracked) return;
      const T upstream = on->grad[0] / static_cast<T>(count);
      T* g = ln->grad_accumulator();
      const T* x = ln->values();
      for (std::size_t l = 0; l < L; ++l) {
        if (tg[l] < 0) continue;
        for (std::size_t i = 0; i < V; ++i) {
          T p = std::exp(x[i * L + l] - lse[l]);
          if (static_cast<int>(i) == tg[l]) p -= T(1);
          g[i * L + l] += upstream * p;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  auto out = Tensor<T>::scalar(s);
  if (Tape* tape = recording_tape<T>({&a})) {
    mark_tracked(out);
    tape->record("sum", [an = a.node(), on = out.node()] {
      if (on->grad.empty() || !an->tracked) return;
      T* g = an->grad_accumulator();
      const std::size_t n = an->numel();
      for (std::size_t i = 0; i < n; ++i) g[i] += on->grad[0];
    });
  }
  return out;
}

#define FLORA_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                  \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                                  \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> repeat_add(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> silu(const Tensor<T>&);                                                   \
  template Tensor<T> softmax_cols(const Tensor<T>&);                                           \
  template Tensor<T> rmsnorm_cols(const Tensor<T>&, const Tensor<T>&, double);                 \
  template Tensor<T> rope(const Tensor<T>&, std::size_t, std::span<const std::size_t>, double); \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                               const AttentionGeometry&, std::span<const KeyRange>);           \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                        \
  template Tensor<T> cross_entropy_cols(const Tensor<T>&, std::span<const int>);               \
  template Tensor<T> sum(const Tensor<T>&);

FLORA_INSTANTIATE_OPS(float)
FLORA_INSTANTIATE_OPS(double)

#undef FLORA_INSTANTIATE_OPS

}  // namespace flora::ops
