// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace flora {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const char* precision_name(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::kF32;
  if (name == "f64") return Precision::kF64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

namespace {

void check_dims(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  check_dims(shape);
  auto node = std::make_shared<Node>();
  node->buffer = std::make_shared<detail::Buffer<T>>();
  node->buffer->values.assign(element_count(shape), value);
  node->shape = std::move(shape);
  return wrap(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values) {
  check_dims(shape);
  if (values.size() != element_count(shape)) {
    throw ShapeError("element count " + std::to_string(values.size()) +
                     " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->buffer = std::make_shared<detail::Buffer<T>>();
  node->buffer->values = std::move(values);
  node->shape = std::move(shape);
  return wrap(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return from_vector({r, c}, std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_vector({}, {value});
}

template <typename T>
const typename Tensor<T>::Node& Tensor<T>::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked().shape;
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return checked().numel();
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto& s = shape();
  if (s.size() != 2) throw ShapeError("expected a matrix, got " + to_string(s));
  return s[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const auto& s = shape();
  if (s.size() != 2) throw ShapeError("expected a matrix, got " + to_string(s));
  return s[1];
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  const auto& n = checked();
  return {n.values(), n.numel()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  auto& n = const_cast<Node&>(checked());
  ++n.buffer->version;
  return {n.buffer->values.data() + n.offset, n.numel()};
}

template <typename T>
std::uint64_t Tensor<T>::version() const {
  return checked().buffer->version;
}

template <typename T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
  const std::size_t c = cols();
  if (row >= rows() || col >= c) {
    throw BoundsError("index (" + std::to_string(row) + ", " + std::to_string(col) +
                      ") outside " + to_string(shape()));
  }
  return data()[row * c + col];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar " + to_string(shape()));
  return data()[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked().requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  auto& n = const_cast<Node&>(checked());
  n.requires_grad = on;
  n.tracked = on;
  if (!on) n.grad.clear();
}

template <typename T>
bool Tensor<T>::tracked() const {
  return checked().tracked;
}

template <typename T>
std::optional<Tensor<T>> Tensor<T>::grad() const {
  const auto& n = checked();
  if (!n.tracked) return std::nullopt;
  if (n.grad.empty()) return zeros(n.shape.empty() ? Shape{} : n.shape);
  return from_vector(n.shape, n.grad);
}

template <typename T>
std::span<const T> Tensor<T>::grad_data() const {
  const auto& n = checked();
  return {n.grad.data(), n.grad.size()};
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !checked().grad.empty();
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& n = const_cast<Node&>(checked());
  if (n.requires_grad) n.grad.assign(n.numel(), T(0));
}

template <typename T>
void Tensor<T>::clear_grad() {
  const_cast<Node&>(checked()).grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto src = data();
  return from_vector(shape(), std::vector<T>(src.begin(), src.end()));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& n = checked();
  auto node = std::make_shared<Node>();
  node->buffer = n.buffer;
  node->offset = n.offset;
  node->shape = n.shape;
  return wrap(std::move(node));
}

template <typename T>
bool Tensor<T>::shares_storage(const Tensor& other) const {
  return checked().buffer == other.checked().buffer;
}

template class Tensor<float>;
template class Tensor<double>;

double max_relative_error(std::span<const double> actual, std::span<const double> expected) {
  if (actual.size() != expected.size()) {
    throw ShapeError("relative error between " + std::to_string(actual.size()) + " and " +
                     std::to_string(expected.size()) + " elements");
  }
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double d = std::abs(actual[i] - expected[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    diff = std::max(diff, d);
    scale = std::max(scale, std::abs(expected[i]));
  }
  return diff / std::max(scale, std::numeric_limits<double>::min());
}

template <typename T>
double max_relative_error(const Tensor<T>& actual, const Tensor<T>& expected) {
  if (actual.shape() != expected.shape()) {
    throw ShapeError("relative error between " + to_string(actual.shape()) + " and " +
                     to_string(expected.shape()));
  }
  auto a = actual.data();
  auto e = expected.data();
  std::vector<double> ad(a.begin(), a.end());
  std::vector<double> ed(e.begin(), e.end());
  return max_relative_error(std::span<const double>(ad), std::span<const double>(ed));
}

template double max_relative_error(const Tensor<float>&, const Tensor<float>&);
template double max_relative_error(const Tensor<double>&, const Tensor<double>&);

template <typename T>
std::uint64_t content_hash(const Tensor<T>& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto bytes = std::as_bytes(t.data());
  for (auto b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  for (auto d : t.shape()) {
    h ^= d;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template std::uint64_t content_hash(const Tensor<float>&, std::uint64_t);
template std::uint64_t content_hash(const Tensor<double>&, std::uint64_t);

}  // namespace flora
