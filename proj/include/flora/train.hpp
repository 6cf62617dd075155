// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adapter fine-tuning on synthetic sequence tasks: frozen base, plain SGD
// at a constant learning rate, one adapter snapshot per epoch and selection
// of the best (learning rate, epoch) cell on held-out data.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flora/config_json.hpp"
#include "flora/model.hpp"

namespace flora {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { kCopy, kReverse, kModularSum };

const char* task_kind_name(TaskKind k);
TaskKind parse_task_kind(const std::string& name);

// Examples are "x_1 .. x_n SEP" followed by the answer y_1 .. y_n, with the
// x drawn from the symbol range [symbol_begin, symbol_begin + n_symbols).
struct SyntheticTask {
  TaskKind kind = TaskKind::kCopy;
  std::size_t min_len = 4;
  std::size_t max_len = 8;
  int symbol_begin = 16;
  std::size_t n_symbols = 32;
  int separator = 3;
  // Draw each input without repeated symbols (needs n_symbols >= max_len).
  bool distinct = false;
  std::size_t train_size = 4000;
  std::size_t validation_size = 500;
  std::size_t test_size = 500;
  std::uint64_t seed = 1;

  void validate(std::size_t vocab_size) const;
  bool operator==(const SyntheticTask&) const = default;
};

struct Example {
  std::vector<int> prompt;  // inputs followed by the separator
  std::vector<int> answer;
};

struct TaskSplits {
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
};

std::vector<int> task_answer(TaskKind kind, std::span<const int> inputs, int symbol_begin,
                             std::size_t n_symbols);
// Pairwise disjoint splits (no input sequence appears twice).
TaskSplits make_splits(const SyntheticTask& task);

// Teacher-forced training sequence: prompt + answer[0..n-1), supervised on
// the answer tokens only.
void append_example(TokenBatch& batch, const Example& ex);
// Packs examples in order into batches of at most batch_tokens columns.
std::vector<TokenBatch> pack_batches(const std::vector<Example>& examples,
                                     std::size_t batch_tokens);

struct TrainConfig {
  double learning_rate = 1e-2;
  std::size_t epochs = 10;
  std::size_t batch_tokens = 4096;
  std::uint64_t seed = 1;
  std::string schedule = "constant";
  // "sgd" (plain, the default) or "adam" (beta1 0.9, beta2 0.999, eps 1e-8).
  std::string optimizer = "sgd";

  void validate() const;
};

struct Metrics {
  double token_accuracy = 0.0;
  double exact_match = 0.0;
  double mean_loss = 0.0;
  std::size_t examples = 0;
  bool operator==(const Metrics&) const = default;
};

// Greedy decoding for the accuracies, teacher-forced loss for mean_loss.
template <typename T>
Metrics evaluate(const TransformerModel<T>& model, const std::vector<Example>& split,
                 std::size_t batch_tokens = 4096);

struct StepLog {
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  double loss = 0.0;
};

template <typename T>
struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  Metrics validation;
  AdapterTensors<T> adapters;  // snapshot at the end of the epoch
};

template <typename T>
struct TrainResult {
  std::vector<StepLog> steps;
  std::vector<EpochRecord<T>> epochs;
  bool diverged = false;
  std::string diagnostic;
  std::uint64_t base_hash = 0;
};

// Optional on-disk outputs of a run.
struct RunOutputs {
  std::filesystem::path dir;  // empty: nothing is written
  bool write_checkpoints = true;
};

// Trains the adapter partitions of `model` in place. Throws ContractError
// if the model has no adapters or the base weights change.
template <typename T>
TrainResult<T> train_adapters(TransformerModel<T>& model, const TaskSplits& data,
                              const TrainConfig& cfg, const RunOutputs& out = {});

// Full-parameter Adam on a mixture of tasks; used to give the frozen base
// something to adapt. Returns the per-step losses.
struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_tokens = 1024;
  double learning_rate = 3e-3;
  std::uint64_t seed = 7;
};

// Sampled examples whose inputs occur in `held_out` are skipped.
template <typename T>
std::vector<StepLog> pretrain_base(TransformerModel<T>& model,
                                   const std::vector<SyntheticTask>& tasks,
                                   const PretrainConfig& cfg,
                                   const std::vector<Example>& held_out = {});

struct SweepConfig {
  double lr_min = 1e-2;
  double lr_max = 1.0;
  std::size_t n_lrs = 7;
  TrainConfig train;
  std::size_t jobs = 1;

  std::vector<double> learning_rates() const;
};

template <typename T>
struct SweepCell {
  double learning_rate = 0.0;
  std::size_t epoch = 0;
  Metrics validation;
  bool diverged = false;
};

template <typename T>
struct SweepResult {
  std::vector<SweepCell<T>> grid;
  std::vector<TrainResult<T>> runs;  // one per learning rate, in order
  double best_learning_rate = 0.0;
  std::size_t best_epoch = 0;
  Metrics best_validation;
  AdapterTensors<T> best_adapters;
};

// Highest validation token accuracy; ties go to the lower learning rate,
// then to the earlier epoch. Throws DivergenceError if every run diverged.
template <typename T>
SweepResult<T> lr_sweep(const std::function<TransformerModel<T>()>& model_factory,
                        const TaskSplits& data, const SweepConfig& cfg,
                        const std::filesystem::path& out_dir = {});

// Index of the winning cell under the selection rule above.
template <typename T>
std::size_t select_best(const std::vector<SweepCell<T>>& grid);

// Pretrain a base on a task mixture, then sweep adapter learning rates on a
// target task and score the selected checkpoint on its test split.
struct ProtocolConfig {
  ModelConfig model;  // includes the adapter under test
  std::uint64_t seed = 1;
  std::vector<SyntheticTask> pretrain_tasks;
  PretrainConfig pretrain;
  SyntheticTask task;
  SweepConfig sweep;

  // Toy model with ffba_aorb r=8. The base learns copy after separator 1 and
  // reverse after separator 2; the adapters learn to copy after separator 2.
  static ProtocolConfig defaults();
};

template <typename T>
struct ProtocolResult {
  std::vector<StepLog> pretrain_log;
  std::uint64_t base_hash_before = 0;  // after pretraining
  std::uint64_t base_hash_after = 0;   // after the sweep
  Metrics initial_test;                // freshly initialized adapters
  SweepResult<T> sweep;
  Metrics selected_test;               // selected checkpoint
};

// Writes base.ckpt, pretrain_loss.csv, sweep/ and summary.json under out_dir
// when it is non-empty.
template <typename T>
ProtocolResult<T> run_protocol(const ProtocolConfig& cfg, const std::filesystem::path& out_dir = {});

Json to_json(const Metrics& m);
Json to_json(const SyntheticTask& t);
SyntheticTask synthetic_task_from_json(const Json& j, const std::string& path);
Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, const std::string& path);
Json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const Json& j, const std::string& path);
Json to_json(const SweepConfig& c);
SweepConfig sweep_config_from_json(const Json& j, const std::string& path);
Json to_json(const ProtocolConfig& c);
ProtocolConfig protocol_config_from_json(const Json& j, const std::string& path = "protocol");

}  // namespace flora
