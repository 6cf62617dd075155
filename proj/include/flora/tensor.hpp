// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with optional gradient tracking.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace flora {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

enum class Precision { kF32, kF64 };

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? Precision::kF32 : Precision::kF64;
}

const char* precision_name(Precision p);
Precision parse_precision(const std::string& name);

namespace detail {

template <typename T>
struct Buffer {
  std::vector<T> values;
  std::uint64_t version = 0;
};

template <typename T>
struct TensorNode {
  std::shared_ptr<Buffer<T>> buffer;
  std::size_t offset = 0;
  Shape shape;
  // Leaf parameter that wants a gradient.
  bool requires_grad = false;
  // Participates in the active tape: a requires_grad leaf, or the output of
  // a recorded op with at least one tracked input.
  bool tracked = false;
  // Empty means "no gradient yet".
  std::vector<T> grad;

  std::size_t numel() const { return element_count(shape); }
  const T* values() const { return buffer->values.data() + offset; }
  T* grad_accumulator() {
    if (grad.empty()) grad.assign(numel(), T(0));
    return grad.data();
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::TensorNode<T>;

  // A null handle; most operations on it throw.
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from_vector(Shape shape, std::vector<T> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Dimension 0 / 1 of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const;
  // Mutable access for parameter updates and cache writes. Bumps the
  // buffer version so derived caches can detect the change.
  std::span<T> mutable_data();
  std::uint64_t version() const;

  T at(std::size_t row, std::size_t col) const;
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool tracked() const;

  // Populated gradient for trainable tensors (zeros if nothing flowed in);
  // nullopt for frozen tensors.
  std::optional<Tensor> grad() const;
  std::span<const T> grad_data() const;
  bool has_grad() const;
  void zero_grad();
  void clear_grad();

  // Deep copy: fresh storage, frozen, untracked.
  Tensor clone() const;
  // Shares storage, drops tracking and gradient state.
  Tensor detach() const;
  bool shares_storage(const Tensor& other) const;

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  const Node& checked() const;
  std::shared_ptr<Node> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

// Converts between precisions (untracked copy).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  auto src = t.data();
  std::vector<To> out(src.begin(), src.end());
  return Tensor<To>::from_vector(t.shape(), std::move(out));
}

// max_i |a_i - b_i| / max(max_i |b_i|, tiny). Shapes must match.
template <typename T>
double max_relative_error(const Tensor<T>& actual, const Tensor<T>& expected);
double max_relative_error(std::span<const double> actual,
                          std::span<const double> expected);

// FNV-1a over the raw element bytes; used to prove frozen tensors untouched.
template <typename T>
std::uint64_t content_hash(const Tensor<T>& t, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace flora
