// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "flora/checkpoint.hpp"
#include "flora/tape.hpp"
#include "flora/train.hpp"
#include "test_util.hpp"

namespace flora {
namespace {

ModelConfig micro(Variant v, std::size_t rank = 2) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 16;
  c.vocab_size = 16;
  c.max_seq_len = 32;
  c.adapter = AdapterSpec::preset(v, rank);
  return c;
}

SyntheticTask micro_task(std::size_t train = 24) {
  SyntheticTask t;
  t.min_len = 2;
  t.max_len = 4;
  t.symbol_begin = 4;
  t.n_symbols = 8;
  t.separator = 1;
  t.train_size = train;
  t.validation_size = 6;
  t.test_size = 6;
  return t;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("flora_train_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

template <typename T>
std::vector<T> flat(const TransformerModel<T>& m) {
  std::vector<T> out;
  for (const auto& p : m.adapter_parameters()) {
    auto d = p.tensor.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

// ---------------------------------------------------------------- tasks

TEST(Tasks, AnswersByKind) {
  const std::vector<int> in{20, 17, 30};
  EXPECT_EQ(task_answer(TaskKind::kCopy, in, 16, 32), (std::vector<int>{20, 17, 30}));
  EXPECT_EQ(task_answer(TaskKind::kReverse, in, 16, 32), (std::vector<int>{30, 17, 20}));
  // Prefix sums of (4, 1, 14) mod 32, shifted back into the symbol range.
  EXPECT_EQ(task_answer(TaskKind::kModularSum, in, 16, 32), (std::vector<int>{20, 21, 35}));
  const std::vector<int> wrap{47, 47};
  EXPECT_EQ(task_answer(TaskKind::kModularSum, wrap, 16, 32), (std::vector<int>{47, 46}));
}

TEST(Tasks, SplitsAreDisjointSizedAndDeterministic) {
  SyntheticTask t;
  t.train_size = 800;
  t.validation_size = 200;
  t.test_size = 200;
  const auto a = make_splits(t);
  ASSERT_EQ(a.train.size(), 800u);
  ASSERT_EQ(a.validation.size(), 200u);
  ASSERT_EQ(a.test.size(), 200u);
  std::set<std::vector<int>> seen;
  for (const auto* split : {&a.train, &a.validation, &a.test}) {
    for (const auto& ex : *split) {
      EXPECT_TRUE(seen.insert(ex.prompt).second);
      EXPECT_EQ(ex.prompt.back(), t.separator);
      EXPECT_EQ(ex.answer.size() + 1, ex.prompt.size());
      EXPECT_GE(ex.answer.size(), t.min_len);
      EXPECT_LE(ex.answer.size(), t.max_len);
    }
  }
  const auto b = make_splits(t);
  for (std::size_t i = 0; i < a.validation.size(); ++i) {
    EXPECT_EQ(a.validation[i].prompt, b.validation[i].prompt);
  }
}

TEST(Tasks, DistinctInputsNeverRepeatSymbols) {
  SyntheticTask t;
  t.distinct = true;
  t.n_symbols = 8;
  t.max_len = 8;
  t.train_size = 300;
  for (const auto& ex : make_splits(t).train) {
    std::set<int> u(ex.prompt.begin(), ex.prompt.end() - 1);
    EXPECT_EQ(u.size(), ex.prompt.size() - 1);
  }
  t.n_symbols = 7;
  EXPECT_THROW(t.validate(256), ConfigError);
}

TEST(Tasks, TooSmallInputSpaceIsAConfigError) {
  SyntheticTask t;
  t.min_len = t.max_len = 1;
  t.n_symbols = 4;
  t.train_size = 10;
  EXPECT_THROW(make_splits(t), ConfigError);
}

TEST(Tasks, ValidateChecksVocabularyAndSeparator) {
  SyntheticTask t;
  EXPECT_NO_THROW(t.validate(256));
  EXPECT_THROW(t.validate(40), ConfigError);
  t.separator = 20;
  EXPECT_THROW(t.validate(256), ConfigError);
}

TEST(Tasks, TeacherForcedLayoutSupervisesAnswerOnly) {
  TokenBatch b;
  append_example(b, Example{{5, 6, 7, 1}, {5, 6, 7}});
  EXPECT_EQ(b.tokens, (std::vector<int>{5, 6, 7, 1, 5, 6}));
  EXPECT_EQ(b.targets, (std::vector<int>{-1, -1, -1, 5, 6, 7}));
}

TEST(Tasks, PackingRespectsBudgetAndKeepsEveryExample) {
  const auto splits = make_splits(micro_task(50));
  std::size_t supervised = 0;
  for (const auto& ex : splits.train) supervised += ex.answer.size();
  for (std::size_t budget : {8u, 20u, 1000u}) {
    std::size_t seen = 0;
    for (const auto& b : pack_batches(splits.train, budget)) {
      EXPECT_LE(b.size(), budget);
      for (int t : b.targets) seen += t >= 0;
    }
    EXPECT_EQ(seen, supervised);
  }
}

// --------------------------------------------------------------- config

TEST(TrainConfigTest, ValidationRules) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0.0;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.schedule = "cosine";
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.optimizer = "rmsprop";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfigTest, StrictJsonNamesTheKey) {
  try {
    train_config_from_json(Json{{"lr", 0.1}}, "train");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.lr"), std::string::npos) << e.what();
  }
  const auto c = train_config_from_json(Json{{"learning_rate", 0.5}, {"epochs", 3}}, "train");
  EXPECT_EQ(c.learning_rate, 0.5);
  EXPECT_EQ(c.epochs, 3u);
}

TEST(TrainConfigTest, ProtocolJsonRoundTripAndKeyPaths) {
  auto c = ProtocolConfig::defaults();
  c.sweep.jobs = 3;
  c.task.separator = 5;
  const auto back = protocol_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  Json bad = to_json(c);
  bad["task"]["sepparator"] = 1;
  try {
    protocol_config_from_json(bad);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("protocol.task.sepparator"), std::string::npos) << e.what();
  }
}

TEST(SweepConfigTest, LearningRatesAreLogSpaced) {
  SweepConfig s;
  const auto lrs = s.learning_rates();
  ASSERT_EQ(lrs.size(), 7u);
  EXPECT_NEAR(lrs.front(), 1e-2, 1e-15);
  EXPECT_NEAR(lrs.back(), 1.0, 1e-12);
  for (std::size_t i = 1; i + 1 < lrs.size(); ++i) {
    EXPECT_NEAR(lrs[i] * lrs[i], lrs[i - 1] * lrs[i + 1], 1e-12);
  }
  s.lr_min = 0.0;
  EXPECT_THROW(s.learning_rates(), ConfigError);
}

// ------------------------------------------------------------- training

TEST(TrainAdapters, ZeroLearningRateLeavesWeightsBitwiseEqual) {
  TransformerModel<double> m(micro(Variant::kFfbaAorB), 3);
  const auto before = flat(m);
  TrainConfig c;
  c.learning_rate = 0.0;
  c.epochs = 2;
  c.batch_tokens = 40;
  train_adapters(m, make_splits(micro_task()), c);
  EXPECT_EQ(flat(m), before);
}

TEST(TrainAdapters, OnlyAdapterTensorsChange) {
  for (Variant v : {Variant::kLora, Variant::kFfa, Variant::kFfbaAB, Variant::kFfbaAorB}) {
    TransformerModel<double> m(micro(v), 4);
    const auto hash = m.base().hash();
    const auto before = flat(m);
    TrainConfig c;
    c.learning_rate = 0.1;
    c.epochs = 2;
    c.batch_tokens = 40;
    const auto r = train_adapters(m, make_splits(micro_task()), c);
    EXPECT_EQ(m.base().hash(), hash) << variant_name(v);
    EXPECT_EQ(r.base_hash, hash);
    EXPECT_NE(flat(m), before) << variant_name(v);
    for (const auto& nt : m.base().named()) EXPECT_FALSE(nt.tensor.has_grad()) << nt.name;
  }
}

TEST(TrainAdapters, RejectsAdapterFreeModel) {
  TransformerModel<double> m(micro(Variant::kNone, 0), 1);
  EXPECT_THROW(train_adapters(m, make_splits(micro_task()), TrainConfig{}), ContractError);
}

TEST(TrainAdapters, StepDeltaMatchesFiniteDifferenceGradient) {
  const auto cfg = micro(Variant::kFfbaAorB);
  TransformerModel<double> m(cfg, 11);
  // A first pass gives B non-zero values so that every partition has a
  // non-trivial gradient.
  const auto splits = make_splits(micro_task(12));
  TrainConfig warm;
  warm.learning_rate = 0.5;
  warm.epochs = 1;
  warm.batch_tokens = 1000;
  train_adapters(m, splits, warm);

  auto params = m.adapter_parameters();
  std::vector<Tensor<double>> inputs;
  for (auto& p : params) inputs.push_back(p.tensor);
  const auto batch = pack_batches(splits.train, 1000);
  ASSERT_EQ(batch.size(), 1u);
  std::vector<double> fd;
  for (const auto& g : testing::numeric_gradients<double>(
           [&] { return m.loss(batch[0]).item(); }, inputs, 1e-5)) {
    fd.insert(fd.end(), g.begin(), g.end());
  }

  const auto before = flat(m);
  TrainConfig step = warm;
  step.learning_rate = 1e-3;
  const auto r = train_adapters(m, splits, step);
  ASSERT_EQ(r.steps.size(), 1u);
  const auto after = flat(m);
  std::vector<double> delta(after.size()), expected(after.size());
  for (std::size_t i = 0; i < after.size(); ++i) {
    delta[i] = after[i] - before[i];
    expected[i] = -1e-3 * fd[i];
  }
  EXPECT_LE(testing::rel_err(delta, expected), 1e-3);
}

TEST(TrainAdapters, LoraAndParallelTwinHaveMatchingLossCurves) {
  TransformerModel<double> naive(micro(Variant::kLora, 3), 21);
  TransformerModel<double> pf(micro(Variant::kPfLora, 3), 21);
  ASSERT_EQ(flat(naive), flat(pf));
  TrainConfig c;
  c.learning_rate = 0.2;
  c.epochs = 4;
  c.batch_tokens = 30;
  const auto splits = make_splits(micro_task(40));
  const auto a = train_adapters(naive, splits, c);
  const auto b = train_adapters(pf, splits, c);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  ASSERT_GT(a.steps.size(), 10u);
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_LE(std::abs(a.steps[i].loss - b.steps[i].loss), 1e-4 * std::abs(b.steps[i].loss))
        << "step " << i + 1;
  }
}

TEST(TrainAdapters, DivergenceStopsWithDiagnostic) {
  TransformerModel<float> m(micro(Variant::kFfbaAorB), 5);
  TrainConfig c;
  c.learning_rate = 1e300;
  c.epochs = 3;
  c.batch_tokens = 20;
  const auto dir = scratch_dir("diverge");
  const auto r = train_adapters(m, make_splits(micro_task()), c, RunOutputs{dir});
  EXPECT_TRUE(r.diverged);
  EXPECT_NE(r.diagnostic.find("non-finite"), std::string::npos) << r.diagnostic;
  EXPECT_LT(r.epochs.size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(dir / "loss.csv"));
}

TEST(TrainAdapters, WritesPerEpochCheckpointsAndLossLog) {
  TransformerModel<double> m(micro(Variant::kFfbaAB), 6);
  TrainConfig c;
  c.learning_rate = 0.1;
  c.epochs = 3;
  c.batch_tokens = 40;
  const auto dir = scratch_dir("outputs");
  const auto r = train_adapters(m, make_splits(micro_task()), c, RunOutputs{dir});
  ASSERT_EQ(r.epochs.size(), 3u);
  for (std::size_t e = 1; e <= 3; ++e) {
    const auto path = dir / ("epoch_0" + std::to_string(e) + ".ckpt");
    ASSERT_TRUE(std::filesystem::exists(path)) << path;
    const auto ck = load_checkpoint<double>(path);
    EXPECT_EQ(ck.config, m.config());
    EXPECT_EQ(ck.meta.at("epoch").get<std::size_t>(), e);
    const auto& snap = r.epochs[e - 1].adapters;
    ASSERT_EQ(ck.tensors.size(), snap.size());
    for (const auto& [name, t] : snap) {
      auto a = ck.tensors.at(name).data();
      auto b = t.data();
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
    }
  }
  std::ifstream log(dir / "loss.csv");
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "step,tokens_seen,loss");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line);) ++lines;
  EXPECT_EQ(lines, r.steps.size());
}

// ------------------------------------------------------------ evaluation

TEST(Evaluate, EmptySplitIsAContractError) {
  TransformerModel<double> m(micro(Variant::kFfbaAorB), 1);
  EXPECT_THROW(evaluate(m, {}), ContractError);
}

TEST(Evaluate, InvariantToBatchPartitioning) {
  TransformerModel<double> m(micro(Variant::kFpa), 2);
  const auto split = make_splits(micro_task(40)).train;
  const auto a = evaluate(m, split, 7);
  const auto b = evaluate(m, split, 10000);
  EXPECT_EQ(a, b);
}

TEST(Evaluate, MemorizedSingleExampleScoresExactly) {
  SyntheticTask t = micro_task(1);
  t.min_len = t.max_len = 2;
  t.n_symbols = 2;
  t.distinct = true;  // two possible inputs: (4,5) and (5,4)
  t.validation_size = 0;
  t.test_size = 0;
  auto cfg = micro(Variant::kNone, 0);
  TransformerModel<double> m(cfg, 8);
  PretrainConfig pc;
  pc.steps = 150;
  pc.batch_tokens = 30;
  pc.learning_rate = 2e-2;
  pretrain_base(m, {t}, pc);
  const auto one = make_splits(t).train;
  const auto metrics = evaluate(m, one);
  EXPECT_EQ(metrics.exact_match, 1.0);
  EXPECT_EQ(metrics.token_accuracy, 1.0);
  EXPECT_LT(metrics.mean_loss, 0.1);
}

TEST(Evaluate, UntrainedModelIsAtChanceLevel) {
  auto cfg = ModelConfig::toy();
  TransformerModel<float> m(cfg, 99);
  SyntheticTask t;
  t.symbol_begin = 1;
  t.n_symbols = 255;
  t.separator = 0;
  t.train_size = 0;
  t.validation_size = 400;
  t.test_size = 0;
  const auto split = make_splits(t).validation;
  std::size_t tokens = 0;
  for (const auto& ex : split) tokens += ex.answer.size();
  const auto metrics = evaluate(m, split);
  const double p = 1.0 / 255.0;
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(tokens));
  EXPECT_LE(std::abs(metrics.token_accuracy - p), 3 * sigma) << metrics.token_accuracy;
}

// --------------------------------------------------------------- sweeps

TEST(Selection, HighestAccuracyWins) {
  std::vector<SweepCell<double>> g{{0.1, 1, {0.5}, false}, {0.3, 2, {0.9}, false},
                                   {1.0, 1, {0.7}, false}};
  EXPECT_EQ(select_best(g), 1u);
}

TEST(Selection, TiesGoToLowerRateThenEarlierEpoch) {
  std::vector<SweepCell<double>> g{{0.3, 1, {0.8}, false}, {0.1, 4, {0.8}, false},
                                   {0.1, 2, {0.8}, false}, {0.01, 1, {0.0}, true}};
  EXPECT_EQ(select_best(g), 2u);
}

TEST(Selection, AllDivergedIsAnError) {
  std::vector<SweepCell<double>> g{{0.3, 1, {}, true}, {1.0, 1, {}, true}};
  EXPECT_THROW(select_best(g), DivergenceError);
}

TEST(Sweep, ReproducibleAcrossRunsAndWorkerCounts) {
  const auto cfg = micro(Variant::kFfbaAorB);
  const TransformerModel<double> base(cfg, 31);
  auto factory = [&] { return base.with_adapters(cfg.adapter, 31); };
  const auto splits = make_splits(micro_task(30));
  SweepConfig s;
  s.lr_min = 0.01;
  s.lr_max = 1.0;
  s.n_lrs = 3;
  s.train.epochs = 2;
  s.train.batch_tokens = 40;
  s.jobs = 1;
  const auto a = lr_sweep<double>(factory, splits, s);
  s.jobs = 3;
  const auto dir = scratch_dir("sweep");
  const auto b = lr_sweep<double>(factory, splits, s, dir);
  EXPECT_EQ(a.best_learning_rate, b.best_learning_rate);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  EXPECT_EQ(a.best_validation, b.best_validation);
  ASSERT_EQ(a.grid.size(), 6u);
  ASSERT_EQ(a.grid.size(), b.grid.size());
  for (std::size_t i = 0; i < a.grid.size(); ++i) {
    EXPECT_EQ(a.grid[i].validation, b.grid[i].validation);
  }
  for (const auto& [name, t] : a.best_adapters) {
    auto x = t.data();
    auto y = b.best_adapters.at(name).data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << name;
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "grid.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "lr_2" / "epoch_02.ckpt"));
  // The selected cell is the argmax of the persisted grid.
  EXPECT_EQ(a.grid[select_best(a.grid)].learning_rate, a.best_learning_rate);
}

TEST(Protocol, SmallRunKeepsBaseFrozenAndWritesArtifacts) {
  auto c = ProtocolConfig::defaults();
  c.model = micro(Variant::kFfbaAorB);
  for (auto& t : c.pretrain_tasks) {
    t.min_len = 2;
    t.max_len = 4;
    t.symbol_begin = 4;
    t.n_symbols = 8;
  }
  c.task = micro_task(20);
  c.task.separator = 2;
  c.task.distinct = true;
  c.pretrain.steps = 5;
  c.pretrain.batch_tokens = 40;
  c.sweep.n_lrs = 2;
  c.sweep.train.epochs = 1;
  c.sweep.train.batch_tokens = 40;
  const auto dir = scratch_dir("protocol");
  const auto r = run_protocol<double>(c, dir);
  EXPECT_EQ(r.base_hash_before, r.base_hash_after);
  EXPECT_EQ(r.pretrain_log.size(), 5u);
  for (const char* f : {"base.ckpt", "pretrain_loss.csv", "summary.json", "sweep/grid.csv",
                        "sweep/best.ckpt"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto base = load_checkpoint<double>(dir / "base.ckpt");
  EXPECT_EQ(base_from_checkpoint(base).hash(), r.base_hash_after);
}

}  // namespace
}  // namespace flora
