// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "flora/checkpoint.hpp"
#include "flora/config_json.hpp"
#include "flora/model.hpp"
#include "flora/op_counter.hpp"
#include "flora/tape.hpp"
#include "test_util.hpp"

namespace flora {
namespace {

using testing::random_tensor;
using M = Tensor<double>;

std::vector<double> values(const M& t) {
  auto d = t.data();
  return {d.begin(), d.end()};
}

ModelConfig toy_with(Variant v, std::size_t rank = 8) {
  auto c = ModelConfig::toy();
  c.adapter = AdapterSpec::preset(v, rank);
  return c;
}

// Random prompt of `n` tokens.
std::vector<int> prompt(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = tok(rng);
  return out;
}

TokenBatch single(const std::vector<int>& seq) {
  TokenBatch b;
  b.append(seq);
  return b;
}

// Replaces every adapter partition with fresh random values.
template <typename T>
void randomize_adapters(const TransformerModel<T>& model, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-0.3, 0.3);
  for (auto& nt : model.adapter_parameters()) {
    for (auto& v : nt.tensor.mutable_data()) v = static_cast<T>(dist(rng));
  }
}

TEST(ParamCountTest, PublishedLoraBudgets) {
  auto c1 = ModelConfig::llama1b();
  c1.adapter = AdapterSpec::preset(Variant::kLora, 32);
  EXPECT_EQ(param_count(c1).trainable, 22544384u);
  auto c3 = ModelConfig::llama3b();
  c3.adapter = AdapterSpec::preset(Variant::kLora, 32);
  EXPECT_EQ(param_count(c3).trainable, 48627712u);
  c1.adapter = AdapterSpec::preset(Variant::kNone, 0);
  EXPECT_EQ(param_count(c1).trainable, 0u);
  c1.adapter = AdapterSpec::preset(Variant::kLora, 0);
  EXPECT_EQ(param_count(c1).trainable, 0u);
}

TEST(ParamCountTest, HandCountedFfbaBudget) {
  // Toy shape, r = 8: five forward adapters of 8x64 plus two 64x8 B per layer.
  auto c = toy_with(Variant::kFfbaAorB);
  EXPECT_EQ(param_count(c).trainable, 2u * (5 * 8 * 64 + 2 * 64 * 8));
  c = toy_with(Variant::kFfbaAB);
  // Plus A of the output (8x64) and down (8x256) FFBLs.
  EXPECT_EQ(param_count(c).trainable, 2u * (5 * 8 * 64 + 2 * 64 * 8 + 8 * 64 + 8 * 256));
}

TEST(ParamCountTest, EnumerationOfAllocatedTensorsMatches) {
  for (Variant v : all_variants()) {
    auto c = toy_with(v, v == Variant::kNone ? 0 : 8);
    TransformerModel<float> model(c, 1);
    std::uint64_t n = 0;
    for (const auto& nt : model.adapter_parameters()) n += nt.tensor.numel();
    EXPECT_EQ(n, param_count(c).trainable) << variant_name(v);
    std::uint64_t base = 0;
    for (const auto& nt : model.base().named()) base += nt.tensor.numel();
    EXPECT_EQ(base, base_param_count(c));
  }
}

TEST(ModelStructureTest, SharedBackwardAdapterPerBlock) {
  for (Variant v : {Variant::kFfbaAB, Variant::kFfbaAorB, Variant::kFfbaQgAdd, Variant::kFpa}) {
    TransformerModel<float> model(toy_with(v), 1);
    for (std::size_t l = 0; l < 2; ++l) {
      int backward = 0;
      for (const auto& nt : model.adapter_parameters()) {
        if (nt.name.rfind("layers." + std::to_string(l) + ".", 0) == 0 &&
            nt.name.back() == 'B') {
          ++backward;
        }
      }
      EXPECT_EQ(backward, 2) << variant_name(v);
    }
    const auto& layer = model.layers()[0];
    EXPECT_EQ(layer.attn.q.role(), LayerRole::kFfl);
    EXPECT_EQ(layer.ffn.up.role(), LayerRole::kFfl);
    const LayerRole back = v == Variant::kFfbaAB ? LayerRole::kFfbl : LayerRole::kFbl;
    EXPECT_EQ(layer.attn.o.role(), back);
    EXPECT_EQ(layer.ffn.down.role(), back);
  }
}

TEST(ModelConfigTest, ValidationRejectsBadGeometry) {
  auto c = ModelConfig::toy();
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::toy();
  c.n_kv_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_with(Variant::kFfa, 24);  // 2r = 48 does not divide 64
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_with(Variant::kFfbaQgAdd, 24);  // only query and gate tile: 64 % 24 != 0
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_with(Variant::kFfbaAorB, 24);  // no tiling, any rank
  EXPECT_NO_THROW(c.validate());
}

class BasePreservation : public ::testing::TestWithParam<Variant> {};

TEST_P(BasePreservation, ZeroInitAdaptersLeaveLogitsUnchanged) {
  const Variant v = GetParam();
  TransformerModel<double> base(ModelConfig::toy(), 3);
  auto adapted = base.with_adapters(AdapterSpec::preset(v, 8), 9);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto seq = prompt(rng, 12, 256);
    auto a = adapted.forward(single(seq));
    auto b = base.forward(single(seq));
    EXPECT_LT(max_relative_error(a, b), 1e-12) << variant_name(v);
  }
}

INSTANTIATE_TEST_SUITE_P(AllVariants, BasePreservation,
                         ::testing::ValuesIn(all_variants().begin(), all_variants().end()),
                         [](const auto& info) { return std::string(variant_name(info.param)); });

// Plain-loop RMSNorm with unit gain.
std::vector<double> ref_rms(const M& x, double eps) {
  const std::size_t d = x.rows(), L = x.cols();
  std::vector<double> out(d * L);
  for (std::size_t l = 0; l < L; ++l) {
    double ms = 0;
    for (std::size_t i = 0; i < d; ++i) ms += x.at(i, l) * x.at(i, l);
    const double s = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t i = 0; i < d; ++i) out[i * L + l] = x.at(i, l) * s;
  }
  return out;
}

// out += B * sum_k (A_k h), all in plain loops.
void add_parallel_adapter(std::vector<double>& out, const M& b, const std::vector<M>& as,
                          const std::vector<double>& h, std::size_t L, bool relu) {
  const std::size_t r = b.cols(), d_in = as[0].cols();
  std::vector<double> z(r * L, 0.0);
  for (const auto& a : as)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t p = 0; p < d_in; ++p) z[i * L + l] += a.at(i, p) * h[p * L + l];
  if (relu)
    for (auto& v : z) v = std::max(v, 0.0);
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t p = 0; p < r; ++p) out[i * L + l] += b.at(i, p) * z[p * L + l];
}

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 16;
  c.n_layers = 1;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  c.adapter = AdapterSpec::preset(v, 2);
  return c;
}

TEST(MhaForwardTest, DeltaPathEqualsUnfusedParallelAdapter) {
  for (Variant v : {Variant::kFfbaAorB, Variant::kFpa}) {
    for (bool relu : {false, true}) {
      auto spec = AdapterSpec::preset(v, 2);
      if (relu) spec.nonlinearity = Nonlinearity::kRelu;
      TransformerModel<double> base(tiny(Variant::kNone), 5);
      auto model = base.with_adapters(spec, 6);
      std::mt19937_64 rng(7);
      randomize_adapters(model, rng);
      auto x = random_tensor<double>({8, 5}, rng);
      TokenBatch batch = single({1, 2, 3, 4, 5});
      const BlockContext ctx{batch.positions, batch.ranges};
      auto fused = mha_forward(model.layers()[0].attn, x, model.config(), ctx);
      auto expected = values(mha_forward(base.layers()[0].attn, x, base.config(), ctx));
      const auto& blk = model.layers()[0].attn;
      add_parallel_adapter(expected, *blk.o.b(), {*blk.q.a(), *blk.k.a(), *blk.v.a()},
                           ref_rms(x, model.config().norm_eps), 5, relu);
      EXPECT_LT(max_relative_error(fused, M::from_vector({8, 5}, expected)), 1e-12);
    }
  }
}

TEST(FfnForwardTest, FpaDeltaEqualsUnfusedParallelAdapter) {
  TransformerModel<double> base(tiny(Variant::kNone), 5);
  auto model = base.with_adapters(AdapterSpec::preset(Variant::kFpa, 2), 6);
  std::mt19937_64 rng(8);
  randomize_adapters(model, rng);
  auto x = random_tensor<double>({8, 4}, rng);
  auto fused = ffn_forward(model.layers()[0].ffn, x, model.config());
  auto expected = values(ffn_forward(base.layers()[0].ffn, x, base.config()));
  const auto& blk = model.layers()[0].ffn;
  add_parallel_adapter(expected, *blk.down.b(), {*blk.up.a(), *blk.gate.a()},
                       ref_rms(x, model.config().norm_eps), 4, false);
  EXPECT_LT(max_relative_error(fused, M::from_vector({8, 4}, expected)), 1e-12);
}

TEST(FfnForwardTest, ReluKillsAllNegativeDelta) {
  auto spec = AdapterSpec::preset(Variant::kFfbaAorB, 2);
  spec.nonlinearity = Nonlinearity::kRelu;
  TransformerModel<double> base(tiny(Variant::kNone), 5);
  auto model = base.with_adapters(spec, 6);
  std::mt19937_64 rng(9);
  randomize_adapters(model, rng);
  auto x = random_tensor<double>({8, 1}, rng);
  // A rows = -h^T make every forward output -|h|^2.
  auto h = ref_rms(x, model.config().norm_eps);
  const auto& blk = model.layers()[0].ffn;
  for (const auto* a : {&*blk.gate.a(), &*blk.up.a()}) {
    auto d = const_cast<M*>(a)->mutable_data();
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t p = 0; p < 8; ++p) d[i * 8 + p] = -h[p];
  }
  auto fused = ffn_forward(blk, x, model.config());
  auto plain = ffn_forward(base.layers()[0].ffn, x, base.config());
  EXPECT_EQ(values(fused), values(plain));
}

TEST(QgAddTest, OnlyQueryAndGateDependOnForwardAdaptersWhenBIsZero) {
  TransformerModel<double> base(ModelConfig::toy(), 3);
  auto model = base.with_adapters(AdapterSpec::preset(Variant::kFfbaQgAdd, 8), 4);
  std::mt19937_64 rng(10);
  auto seq = prompt(rng, 10, 256);
  auto reference = model.forward(single(seq));
  std::uniform_real_distribution<double> dist(-1, 1);
  for (auto& nt : model.adapter_parameters()) {
    const bool independent = nt.name.find(".k.A") != std::string::npos ||
                             nt.name.find(".v.A") != std::string::npos ||
                             nt.name.find(".up.A") != std::string::npos;
    if (independent)
      for (auto& v : nt.tensor.mutable_data()) v = dist(rng);
  }
  EXPECT_EQ(values(model.forward(single(seq))), values(reference));
  for (auto& nt : model.adapter_parameters()) {
    if (nt.name == "layers.0.attn.q.A")
      for (auto& v : nt.tensor.mutable_data()) v = dist(rng);
  }
  EXPECT_GT(max_relative_error(model.forward(single(seq)), reference), 1e-6);
}

TEST(TokenBatchTest, PackedSequencesDoNotInteract) {
  TransformerModel<double> model(toy_with(Variant::kFfbaAorB), 2);
  std::mt19937_64 rng(11);
  randomize_adapters(model, rng);
  auto s1 = prompt(rng, 7, 256), s2 = prompt(rng, 5, 256);
  TokenBatch packed;
  packed.append(s1);
  packed.append(s2);
  auto both = model.forward(packed);
  auto a = model.forward(single(s1));
  auto b = model.forward(single(s2));
  for (std::size_t i = 0; i < 256; ++i) {
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(both.at(i, j), a.at(i, j), 1e-12);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(both.at(i, 7 + j), b.at(i, j), 1e-12);
  }
}

TEST(DecodeTest, CachedStepsMatchFullRecompute) {
  for (Variant v : {Variant::kNone, Variant::kLora, Variant::kFfa, Variant::kFfbaAB}) {
    TransformerModel<float> model(toy_with(v), 12);
    std::mt19937_64 rng(13);
    randomize_adapters(model, rng);
    auto seq = prompt(rng, 6, 256);
    auto cache = model.make_cache();
    model.prefill(std::span<const int>(seq).first(3), cache);
    for (std::size_t i = 3; i < seq.size(); ++i) {
      auto step = model.decode_step(seq[i], cache);
      std::vector<int> prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(i) + 1);
      auto full = model.forward(single(prefix));
      std::vector<float> last(256);
      for (std::size_t r = 0; r < 256; ++r) last[r] = full.at(r, i);
      EXPECT_LT(max_relative_error(step, Tensor<float>::from_vector({256, 1}, last)), 1e-5)
          << variant_name(v) << " step " << i;
    }
  }
}

TEST(DecodeTest, GreedyDecodeOfZeroAdaptersMatchesBaseAndIsDeterministic) {
  TransformerModel<float> base(ModelConfig::toy(), 14);
  std::mt19937_64 rng(15);
  auto p = prompt(rng, 5, 256);
  auto expected = base.generate(p, 20);
  for (Variant v : all_variants()) {
    auto model = base.with_adapters(AdapterSpec::preset(v, v == Variant::kNone ? 0 : 8), 16);
    EXPECT_EQ(model.generate(p, 20), expected) << variant_name(v);
  }
  EXPECT_EQ(TransformerModel<float>(ModelConfig::toy(), 14).generate(p, 20), expected);
}

TEST(DecodeTest, CacheOverflowIsACapacityError) {
  auto c = ModelConfig::toy();
  c.max_seq_len = 4;
  TransformerModel<float> model(c, 1);
  auto cache = model.make_cache();
  const int p[] = {1, 2, 3};
  model.prefill(p, cache);
  model.decode_step(4, cache);
  EXPECT_THROW(model.decode_step(5, cache), CapacityError);
}

TEST(DecodeTest, BaseModelRecordsNoAdapterOps) {
  TransformerModel<float> model(ModelConfig::toy(), 1);
  auto cache = model.make_cache();
  const int p[] = {1, 2, 3};
  model.prefill(p, cache);
  OpCounter counter;
  {
    OpCounterScope scope(counter);
    model.decode_step(4, cache);
  }
  EXPECT_EQ(counter.totals().total(Attribution::kAdapter), 0u);
  EXPECT_EQ(counter.totals().count(OpKind::kPlainMatmul), 2u * 7 + 1);
}

TEST(CheckpointTest, RoundTripIsBitExact) {
  auto dir = std::filesystem::temp_directory_path() / "flora_ckpt_test";
  std::filesystem::remove_all(dir);
  TransformerModel<float> model(toy_with(Variant::kFfbaAB), 21);
  std::mt19937_64 rng(22);
  randomize_adapters(model, rng);
  save_checkpoint(dir / "base.ckpt", model.config(), model.base().named());
  save_checkpoint(dir / "adapters.ckpt", model.config(), model.adapter_parameters(),
                  Json{{"epoch", 3}});
  auto base_ck = load_checkpoint<float>(dir / "base.ckpt");
  auto ad_ck = load_checkpoint<float>(dir / "adapters.ckpt");
  EXPECT_EQ(ad_ck.config, model.config());
  EXPECT_EQ(ad_ck.meta["epoch"], 3);
  TransformerModel<float> restored(ad_ck.config, base_from_checkpoint(base_ck),
                                   adapters_from_checkpoint(ad_ck));
  EXPECT_EQ(restored.base().hash(), model.base().hash());
  auto seq = prompt(rng, 8, 256);
  auto a = restored.forward(single(seq));
  auto b = model.forward(single(seq));
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_THROW(load_checkpoint<double>(dir / "base.ckpt"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(ConfigJsonTest, StrictParsingNamesTheKeyPath) {
  auto j = Json::parse(R"({"shape": "toy", "d_model": 64, "d_fff": 3})");
  try {
    model_config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.d_fff"), std::string::npos) << e.what();
  }
  auto a = Json::parse(R"({"variant": "ffba_qg_add", "rank": 4, "add_set": ["query", "gtae"]})");
  try {
    adapter_spec_from_json(a);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("adapter.add_set[1]"), std::string::npos) << e.what();
  }
  auto ok = adapter_spec_from_json(Json::parse(R"({"variant": "ffba_qg_add", "rank": 4})"));
  EXPECT_EQ(ok, AdapterSpec::preset(Variant::kFfbaQgAdd, 4));
  EXPECT_EQ(adapter_spec_from_json(to_json(ok)), ok);
  EXPECT_EQ(model_config_from_json(to_json(ModelConfig::bench())), ModelConfig::bench());
}

}  // namespace
}  // namespace flora
