// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "flora/ops.hpp"
#include "flora/tape.hpp"
#include "flora/tensor.hpp"
#include "test_util.hpp"

namespace flora {
namespace {

using testing::numeric_gradients;
using testing::random_tensor;
using testing::rel_err;
using testing::tape_gradients;

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  auto d = t.data();
  return {d.begin(), d.end()};
}

TEST(TensorTest, ElementCountMatchesShape) {
  auto t = Tensor<double>::zeros({3, 4});
  EXPECT_EQ(t.numel(), 12u);
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_THROW(Tensor<double>::from_vector({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<double>::zeros({2, 0}), ShapeError);
}

TEST(TensorTest, FrozenTensorsNeverReceiveGradient) {
  auto w = Tensor<double>::matrix({{1, 2}, {3, 4}});
  auto x = Tensor<double>::matrix({{1}, {1}});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::matmul(w, x)));
  }
  EXPECT_FALSE(w.grad().has_value());
  EXPECT_FALSE(w.has_grad());
  ASSERT_TRUE(x.grad().has_value());
  EXPECT_EQ(values(*x.grad()), (std::vector<double>{4, 6}));
}

TEST(MatmulTest, IdentityAndHandSum) {
  auto id = Tensor<double>::matrix({{1, 0}, {0, 1}});
  auto col = Tensor<double>::matrix({{2}, {3}});
  EXPECT_EQ(values(ops::matmul(id, col)), (std::vector<double>{2, 3}));
  auto row = Tensor<double>::matrix({{1, 1}});
  EXPECT_EQ(values(ops::matmul(row, col)), (std::vector<double>{5}));
}

TEST(MatmulTest, MismatchNamesBothShapes) {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 5});
  try {
    ops::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

template <typename T>
void check_triple_loop(std::size_t m, std::size_t k, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto a = random_tensor<T>({m, k}, rng);
  auto b = random_tensor<T>({k, n}, rng);
  auto c = ops::matmul(a, b);
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ad[i * k + p] * bd[p * n + j];
      ASSERT_EQ(c.at(i, j), acc) << i << "," << j;
    }
  }
}

TEST(MatmulTest, BitExactAgainstTripleLoop) {
  check_triple_loop<double>(8, 8, 8, 1);
  check_triple_loop<float>(8, 8, 8, 2);
  check_triple_loop<double>(37, 19, 1, 3);
  check_triple_loop<float>(70, 64, 1, 4);
  check_triple_loop<double>(5, 33, 9, 5);
}

TEST(MatmulTest, StackedWeightsEqualSeparateProductsBitwise) {
  std::mt19937_64 rng(7);
  for (std::size_t n : {1u, 3u, 16u}) {
    auto w = random_tensor<float>({24, 16}, rng);
    auto a = random_tensor<float>({4, 16}, rng);
    auto x = random_tensor<float>({16, n}, rng);
    auto fused = ops::matmul(ops::concat_rows({w, a}), x);
    auto separate = ops::concat_rows({ops::matmul(w, x), ops::matmul(a, x)});
    EXPECT_EQ(values(fused), values(separate));
  }
}

TEST(ConcatRowsTest, DefinitionAndIdentity) {
  auto a = Tensor<double>::matrix({{1, 2}});
  auto b = Tensor<double>::matrix({{3, 4}});
  auto c = ops::concat_rows({a, b});
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(values(c), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(values(ops::concat_rows({a})), values(a));
  EXPECT_THROW(ops::concat_rows({a, Tensor<double>::zeros({1, 3})}), ShapeError);
}

TEST(ConcatRowsTest, SliceRoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  auto a = random_tensor<double>({5, 3}, rng);
  auto b = random_tensor<double>({2, 3}, rng);
  auto c = ops::concat_rows({a, b});
  EXPECT_EQ(values(ops::slice_rows(c, 0, 5)), values(a));
  EXPECT_EQ(values(ops::slice_rows(c, 5, 7)), values(b));
}

TEST(SliceRowsTest, DefinitionIdentityAndBounds) {
  auto t = Tensor<double>::matrix({{1}, {2}, {3}});
  EXPECT_EQ(values(ops::slice_rows(t, 0, 2)), (std::vector<double>{1, 2}));
  EXPECT_EQ(values(ops::slice_rows(t, 0, 3)), values(t));
  EXPECT_THROW(ops::slice_rows(t, 2, 2), BoundsError);
  EXPECT_THROW(ops::slice_rows(t, 1, 4), BoundsError);
}

TEST(SliceRowsTest, GradientRoutesToSlicedRowsOnly) {
  auto t = Tensor<double>::matrix({{1, 2}, {3, 4}, {5, 6}});
  t.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::slice_rows(t, 1, 2)));
  }
  EXPECT_EQ(values(*t.grad()), (std::vector<double>{0, 0, 1, 1, 0, 0}));
}

TEST(RepeatAddTest, BlockTiling) {
  auto y = Tensor<double>::matrix({{1}, {3}, {5}, {7}});
  auto dy = Tensor<double>::matrix({{10}, {20}});
  EXPECT_EQ(values(ops::repeat_add(y, dy)), (std::vector<double>{11, 23, 15, 27}));
  EXPECT_EQ(values(ops::repeat_add(y, Tensor<double>::zeros({2, 1}))), values(y));
}

TEST(RepeatAddTest, FullWidthDegeneratesToAdd) {
  std::mt19937_64 rng(3);
  auto y = random_tensor<double>({6, 4}, rng);
  auto dy = random_tensor<double>({6, 4}, rng);
  EXPECT_EQ(values(ops::repeat_add(y, dy)), values(ops::add(y, dy)));
}

TEST(RepeatAddTest, RejectsNonDivisibleWidth) {
  EXPECT_THROW(ops::repeat_add(Tensor<double>::zeros({5, 1}), Tensor<double>::zeros({2, 1})),
               PreconditionError);
}

TEST(RepeatAddTest, GradientOfTiledInputMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::vector<Tensor<double>> in = {random_tensor<double>({4, 3}, rng, -1, 1, true),
                                    random_tensor<double>({2, 3}, rng, -1, 1, true)};
  auto analytic = tape_gradients<double>(
      [&] { return ops::sum(ops::repeat_add(in[0], in[1])); }, in);
  auto numeric = numeric_gradients<double>(
      [&] { return ops::sum(ops::repeat_add(in[0], in[1])).item(); }, in, 1e-5);
  for (double g : numeric[1]) EXPECT_NEAR(g, 2.0, 1e-9);
  for (double g : analytic[1]) EXPECT_EQ(g, 2.0);
  EXPECT_LT(rel_err(analytic[0], numeric[0]), 1e-6);
}

TEST(ElementwiseTest, ScalarDefinitions) {
  auto r = ops::relu(Tensor<double>::matrix({{-1, 0, 2}}));
  EXPECT_EQ(values(r), (std::vector<double>{0, 0, 2}));
  auto s = ops::silu(Tensor<double>::scalar(1.0));
  EXPECT_NEAR(s.item(), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(s.item(), 0.7310585786300049, 1e-15);
  auto sm = ops::softmax_cols(Tensor<double>::full({4, 2}, 3.5));
  for (double v : values(sm)) EXPECT_DOUBLE_EQ(v, 0.25);
  auto big = ops::softmax_cols(Tensor<double>::matrix({{1000}, {1000}}));
  EXPECT_DOUBLE_EQ(big.at(0, 0), 0.5);
}

TEST(ElementwiseTest, ReluSubgradientAtZeroIsZero) {
  auto x = Tensor<double>::matrix({{-1, 0, 2}});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::relu(x)));
  }
  EXPECT_EQ(values(*x.grad()), (std::vector<double>{0, 0, 1}));
}

TEST(ElementwiseTest, ShapeMismatchIsRejected) {
  auto a = Tensor<double>::zeros({2, 2});
  auto b = Tensor<double>::zeros({2, 3});
  EXPECT_THROW(ops::add(a, b), ShapeError);
  EXPECT_THROW(ops::mul(a, b), ShapeError);
  EXPECT_THROW(ops::rmsnorm_cols(a, Tensor<double>::zeros({3, 1}), 1e-6), ShapeError);
}

TEST(BackwardTest, LinearCaseBroadcastsInputPerRow) {
  auto w = Tensor<double>::matrix({{1, 2, 3}, {4, 5, 6}});
  w.set_requires_grad(true);
  auto x = Tensor<double>::matrix({{7}, {8}, {9}});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::matmul(w, x)));
  }
  EXPECT_EQ(values(*w.grad()), (std::vector<double>{7, 8, 9, 7, 8, 9}));
}

TEST(BackwardTest, DisconnectedTrainableTensorHasZeroGradient) {
  auto w = Tensor<double>::matrix({{1, 2}});
  w.set_requires_grad(true);
  auto t = Tensor<double>::matrix({{3, 4}});
  t.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::scale(w, 2.0)));
  }
  ASSERT_TRUE(t.grad().has_value());
  EXPECT_EQ(values(*t.grad()), (std::vector<double>{0, 0}));
}

TEST(BackwardTest, NonScalarLossIsAContractError) {
  auto w = Tensor<double>::matrix({{1, 2}});
  w.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  auto y = ops::scale(w, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(BackwardTest, ReplayVisitsOpsInExactReverseOrder) {
  auto w = Tensor<double>::matrix({{1, -2}, {3, 4}});
  w.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    auto h = ops::matmul(w, Tensor<double>::matrix({{1}, {1}}));
    auto r = ops::relu(h);
    auto s = ops::scale(r, 3.0);
    tape.backward(ops::sum(s));
  }
  ASSERT_EQ(tape.size(), 4u);
  std::vector<std::size_t> expected(tape.size());
  std::iota(expected.rbegin(), expected.rend(), 0);
  EXPECT_EQ(tape.last_replay(), expected);
  EXPECT_STREQ(tape.op_name(0), "matmul");
  EXPECT_STREQ(tape.op_name(3), "sum");
}

TEST(BackwardTest, NoGradScopeSuspendsRecording) {
  auto w = Tensor<double>::matrix({{1, 2}});
  w.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  {
    NoGradScope off;
    auto y = ops::scale(w, 2.0);
    EXPECT_FALSE(y.tracked());
  }
  EXPECT_EQ(tape.size(), 0u);
}

// A composite graph touching every differentiable primitive.
template <typename T>
Tensor<T> composite(const std::vector<Tensor<T>>& p, const Tensor<T>& x) {
  const auto& w = p[0];
  const auto& a = p[1];
  const auto& gain = p[2];
  auto stacked = ops::matmul(ops::concat_rows({w, a}), x);
  auto y = ops::slice_rows(stacked, 0, w.rows());
  auto dy = ops::slice_rows(stacked, w.rows(), stacked.rows());
  auto z = ops::repeat_add(y, dy);
  auto n = ops::rmsnorm_cols(z, gain, 1e-6);
  auto g = ops::mul(ops::silu(n), ops::relu(ops::add(n, ops::scale(z, T(0.5)))));
  auto s = ops::softmax_cols(g);
  auto cat = ops::concat_cols({s, z});
  auto t = ops::mul(ops::transpose(g), ops::transpose(n));
  return ops::add(ops::sum(ops::mul(cat, cat)), ops::sum(t));
}

template <typename T>
double composite_gradient_error(std::uint64_t seed, double rel_step) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  const std::size_t q = dim(rng), f = 1 + dim(rng) % 2, d_i = 2 * dim(rng), L = dim(rng);
  const std::size_t d_o = q * f;
  std::vector<Tensor<T>> p = {random_tensor<T>({d_o, d_i}, rng, -1, 1, true),
                              random_tensor<T>({q, d_i}, rng, -1, 1, true),
                              random_tensor<T>({d_o, 1}, rng, 0.5, 1.5, true)};
  auto x = random_tensor<T>({d_i, L}, rng);
  auto analytic = tape_gradients<T>([&] { return composite(p, x); }, p);
  // The difference quotient is taken in 64-bit on the same inputs; in 32-bit
  // its rounding noise alone exceeds the 32-bit tolerance.
  std::vector<Tensor<double>> pd;
  for (const auto& t : p) pd.push_back(cast<double>(t));
  auto xd = cast<double>(x);
  auto numeric = numeric_gradients<double>([&] { return composite(pd, xd).item(); }, pd, rel_step);
  double worst = 0;
  for (std::size_t i = 0; i < p.size(); ++i) worst = std::max(worst, rel_err(analytic[i], numeric[i]));
  return worst;
}

TEST(BackwardTest, CompositeGraphMatchesFiniteDifferences64) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LT(composite_gradient_error<double>(seed, 1e-5), 1e-6) << "seed " << seed;
  }
}

TEST(BackwardTest, CompositeGraphMatchesFiniteDifferences32) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LT(composite_gradient_error<float>(seed, 1e-3), 1e-4) << "seed " << seed;
  }
}

TEST(ReferenceHelpersTest, RelativeErrorAndHash) {
  auto a = Tensor<double>::matrix({{1, 2}});
  auto b = Tensor<double>::matrix({{1, 2.5}});
  EXPECT_DOUBLE_EQ(max_relative_error(a, b), 0.5 / 2.5);
  EXPECT_EQ(content_hash(a), content_hash(a.clone()));
  EXPECT_NE(content_hash(a), content_hash(b));
}

}  // namespace
}  // namespace flora
