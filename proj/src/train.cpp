// Copyright (c) 2026, The flora-adapters Authors
// SPDX-License-Identifier: Apache-2.0

#include "flora/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "flora/checkpoint.hpp"
#include "flora/ops.hpp"
#include "flora/tape.hpp"

namespace flora {

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kModularSum: return "modular_sum";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
  for (TaskKind k : {TaskKind::kCopy, TaskKind::kReverse, TaskKind::kModularSum}) {
    if (name == task_kind_name(k)) return k;
  }
  throw ConfigError("unknown task kind '" + name + "' (expected copy, reverse, modular_sum)");
}

void SyntheticTask::validate(std::size_t vocab_size) const {
  if (min_len == 0 || max_len < min_len) throw ConfigError("task: need 1 <= min_len <= max_len");
  if (n_symbols < 2) throw ConfigError("task.n_symbols must be at least 2");
  if (distinct && n_symbols < max_len) {
    throw ConfigError("task.distinct needs n_symbols >= max_len");
  }
  if (symbol_begin < 0 || static_cast<std::size_t>(symbol_begin) + n_symbols > vocab_size) {
    throw ConfigError("task: symbol range exceeds the vocabulary of " + std::to_string(vocab_size));
  }
  if (separator < 0 || static_cast<std::size_t>(separator) >= vocab_size ||
      (separator >= symbol_begin && separator < symbol_begin + static_cast<int>(n_symbols))) {
    throw ConfigError("task.separator must be a vocabulary token outside the symbol range");
  }
}

std::vector<int> task_answer(TaskKind kind, std::span<const int> in, int symbol_begin,
                             std::size_t n_symbols) {
  std::vector<int> out(in.begin(), in.end());
  switch (kind) {
    case TaskKind::kCopy:
      break;
    case TaskKind::kReverse:
      std::reverse(out.begin(), out.end());
      break;
    case TaskKind::kModularSum: {
      std::size_t acc = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        acc = (acc + static_cast<std::size_t>(in[i] - symbol_begin)) % n_symbols;
        out[i] = symbol_begin + static_cast<int>(acc);
      }
      break;
    }
  }
  return out;
}

namespace {

Example sample_example(const SyntheticTask& task, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(task.min_len, task.max_len);
  std::uniform_int_distribution<int> sym(task.symbol_begin,
                                         task.symbol_begin + static_cast<int>(task.n_symbols) - 1);
  std::vector<int> inputs(len(rng));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    do {
      inputs[i] = sym(rng);
    } while (task.distinct && std::find(inputs.begin(), inputs.begin() + i, inputs[i]) !=
                                  inputs.begin() + i);
  }
  Example ex;
  ex.answer = task_answer(task.kind, inputs, task.symbol_begin, task.n_symbols);
  ex.prompt = std::move(inputs);
  ex.prompt.push_back(task.separator);
  return ex;
}

}  // namespace

TaskSplits make_splits(const SyntheticTask& task) {
  std::mt19937_64 rng(task.seed);
  std::set<std::vector<int>> seen;
  TaskSplits splits;
  const std::size_t wanted = task.train_size + task.validation_size + task.test_size;
  std::size_t attempts = 0;
  auto fill = [&](std::vector<Example>& split, std::size_t n) {
    while (split.size() < n) {
      if (++attempts > 50 * wanted + 1000) {
        throw ConfigError("task: input space too small for " + std::to_string(wanted) +
                          " distinct examples");
      }
      auto ex = sample_example(task, rng);
      if (seen.insert(ex.prompt).second) split.push_back(std::move(ex));
    }
  };
  fill(splits.train, task.train_size);
  fill(splits.validation, task.validation_size);
  fill(splits.test, task.test_size);
  return splits;
}

void append_example(TokenBatch& batch, const Example& ex) {
  std::vector<int> seq = ex.prompt;
  seq.insert(seq.end(), ex.answer.begin(), ex.answer.end() - 1);
  std::vector<int> targets(seq.size(), -1);
  for (std::size_t i = 0; i < ex.answer.size(); ++i) targets[ex.prompt.size() - 1 + i] = ex.answer[i];
  batch.append(seq, targets);
}

std::vector<TokenBatch> pack_batches(const std::vector<Example>& examples,
                                     std::size_t batch_tokens) {
  std::vector<TokenBatch> out;
  TokenBatch cur;
  for (const auto& ex : examples) {
    const std::size_t len = ex.prompt.size() + ex.answer.size() - 1;
    if (cur.size() > 0 && cur.size() + len > batch_tokens) {
      out.push_back(std::move(cur));
      cur = TokenBatch{};
    }
    append_example(cur, ex);
  }
  if (cur.size() > 0) out.push_back(std::move(cur));
  return out;
}

void TrainConfig::validate() const {
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw ConfigError("train.learning_rate must be a finite non-negative number");
  }
  if (epochs == 0) throw ConfigError("train.epochs must be positive");
  if (batch_tokens == 0) throw ConfigError("train.batch_tokens must be positive");
  if (schedule != "constant") throw ConfigError("train.schedule: only 'constant' is supported");
  if (optimizer != "sgd" && optimizer != "adam") {
    throw ConfigError("train.optimizer must be 'sgd' or 'adam'");
  }
}

namespace {

// Sum of per-column cross entropy over supervised columns, in double.
template <typename T>
std::pair<double, std::size_t> column_losses(const Tensor<T>& logits, const std::vector<int>& targets) {
  double total = 0.0;
  std::size_t n = 0;
  const std::size_t V = logits.rows(), L = logits.cols();
  auto d = logits.data();
  for (std::size_t j = 0; j < L; ++j) {
    if (targets[j] < 0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < V; ++i) mx = std::max(mx, static_cast<double>(d[i * L + j]));
    double s = 0.0;
    for (std::size_t i = 0; i < V; ++i) s += std::exp(static_cast<double>(d[i * L + j]) - mx);
    total += mx + std::log(s) - static_cast<double>(d[static_cast<std::size_t>(targets[j]) * L + j]);
    ++n;
  }
  return {total, n};
}

}  // namespace

template <typename T>
Metrics evaluate(const TransformerModel<T>& model, const std::vector<Example>& split,
                 std::size_t batch_tokens) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  NoGradScope no_grad;
  Metrics m;
  m.examples = split.size();
  std::size_t correct = 0, tokens = 0, exact = 0;
  for (const auto& ex : split) {
    auto out = model.generate(ex.prompt, ex.answer.size());
    std::size_t ok = 0;
    for (std::size_t i = 0; i < out.size(); ++i) ok += out[i] == ex.answer[i];
    correct += ok;
    tokens += ex.answer.size();
    exact += ok == ex.answer.size();
  }
  double loss = 0.0;
  std::size_t supervised = 0;
  for (const auto& batch : pack_batches(split, batch_tokens)) {
    auto [sum, n] = column_losses(model.forward(batch), batch.targets);
    loss += sum;
    supervised += n;
  }
  m.token_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
  m.exact_match = static_cast<double>(exact) / static_cast<double>(split.size());
  m.mean_loss = loss / static_cast<double>(supervised);
  return m;
}

namespace {

// Adam with bias correction; moments kept in double.
class Adam {
 public:
  explicit Adam(std::vector<std::size_t> sizes) {
    for (auto n : sizes) {
      m_.emplace_back(n, 0.0);
      v_.emplace_back(n, 0.0);
    }
  }

  template <typename T>
  void update(std::size_t slot, std::span<T> w, std::span<const T> g, double lr) {
    auto& m = m_[slot];
    auto& v = v_[slot];
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      m[k] = kBeta1 * m[k] + (1 - kBeta1) * gk;
      v[k] = kBeta2 * v[k] + (1 - kBeta2) * gk * gk;
      w[k] -= static_cast<T>(lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + kEps));
    }
  }

  void next_step() { ++t_; }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

template <typename T>
std::vector<std::size_t> sizes_of(const std::vector<NamedTensor<T>>& params) {
  std::vector<std::size_t> out;
  for (const auto& p : params) out.push_back(p.tensor.numel());
  return out;
}

template <typename T>
AdapterTensors<T> snapshot(const AdapterTensors<T>& adapters) {
  AdapterTensors<T> out;
  for (const auto& [name, t] : adapters) out.emplace(name, t.clone());
  return out;
}

std::string epoch_file(std::size_t epoch) {
  std::ostringstream s;
  s << "epoch_" << std::setw(2) << std::setfill('0') << epoch << ".ckpt";
  return s.str();
}

}  // namespace

template <typename T>
TrainResult<T> train_adapters(TransformerModel<T>& model, const TaskSplits& data,
                              const TrainConfig& cfg, const RunOutputs& out) {
  cfg.validate();
  if (!model.config().adapter.has_adapters()) {
    throw ContractError("train_adapters: the model has no adapters to train");
  }
  if (data.train.empty() || data.validation.empty()) {
    throw ContractError("train_adapters: empty train or validation split");
  }
  TrainResult<T> result;
  result.base_hash = model.base().hash();
  auto params = model.adapter_parameters();
  const bool use_adam = cfg.optimizer == "adam";
  Adam adam(use_adam ? sizes_of(params) : std::vector<std::size_t>{});
  std::ofstream loss_log;
  if (!out.dir.empty()) {
    std::filesystem::create_directories(out.dir);
    loss_log.open(out.dir / "loss.csv");
    loss_log << "step,tokens_seen,loss\n";
    loss_log << std::setprecision(17);
  }
  std::vector<Example> order = data.train;
  std::size_t step = 0, tokens_seen = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
    std::mt19937_64 rng(cfg.seed * 1000003ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (const auto& batch : pack_batches(order, cfg.batch_tokens)) {
      for (auto& p : params) p.tensor.clear_grad();
      Tape tape;
      double loss_value;
      {
        TapeScope scope(tape);
        auto loss = model.loss(batch);
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
          result.diverged = true;
          result.diagnostic = "non-finite loss at step " + std::to_string(step + 1) + " (epoch " +
                              std::to_string(epoch) + ", lr " + std::to_string(cfg.learning_rate) + ")";
          break;
        }
        tape.backward(loss);
      }
      const T lr = static_cast<T>(cfg.learning_rate);
      adam.next_step();
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        auto g = p.tensor.grad_data();
        if (g.empty()) continue;
        auto w = p.tensor.mutable_data();
        if (use_adam) {
          adam.update<T>(k, w, g, cfg.learning_rate);
        } else {
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
        }
        p.tensor.clear_grad();
        if (!result.diverged &&
            std::any_of(w.begin(), w.end(), [](T x) { return !std::isfinite(x); })) {
          result.diverged = true;
          result.diagnostic = "non-finite adapter weights in '" + p.name + "' after step " +
                              std::to_string(step + 1) + " (epoch " + std::to_string(epoch) +
                              ", lr " + std::to_string(cfg.learning_rate) + ")";
        }
      }
      ++step;
      tokens_seen += batch.size();
      result.steps.push_back({step, tokens_seen, loss_value});
      if (loss_log) loss_log << step << ',' << tokens_seen << ',' << loss_value << '\n';
      epoch_loss += loss_value;
      ++epoch_steps;
      if (result.diverged) break;
    }
    if (result.diverged) break;
    EpochRecord<T> rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_steps, 1));
    rec.validation = evaluate(model, data.validation, cfg.batch_tokens);
    if (!std::isfinite(rec.validation.mean_loss)) {
      result.diverged = true;
      result.diagnostic = "non-finite validation loss after epoch " + std::to_string(epoch);
      break;
    }
    rec.adapters = snapshot(model.adapters());
    if (!out.dir.empty() && out.write_checkpoints) {
      save_checkpoint(out.dir / epoch_file(epoch), model.config(), model.adapter_parameters(),
                      Json{{"epoch", epoch},
                           {"learning_rate", cfg.learning_rate},
                           {"train_loss", rec.train_loss},
                           {"validation", to_json(rec.validation)}});
    }
    result.epochs.push_back(std::move(rec));
  }
  if (model.base().hash() != result.base_hash) {
    throw ContractError("train_adapters: frozen base weights changed during training");
  }
  return result;
}

namespace {

std::vector<int> inputs_of(const Example& ex) {
  return std::vector<int>(ex.prompt.begin(), ex.prompt.end() - 1);
}

}  // namespace

template <typename T>
std::vector<StepLog> pretrain_base(TransformerModel<T>& model,
                                   const std::vector<SyntheticTask>& tasks,
                                   const PretrainConfig& cfg,
                                   const std::vector<Example>& held_out) {
  if (tasks.empty()) throw ConfigError("pretrain: no tasks");
  std::set<std::vector<int>> excluded;
  for (const auto& ex : held_out) excluded.insert(inputs_of(ex));
  for (const auto& t : tasks) t.validate(model.config().vocab_size);
  auto base = model.base();
  auto params = base.named();
  for (auto& p : params) p.tensor.set_requires_grad(true);
  Adam adam(sizes_of(params));
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, tasks.size() - 1);
  std::vector<StepLog> log;
  std::size_t tokens_seen = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    TokenBatch batch;
    for (;;) {
      const auto& task = tasks[pick(rng)];
      auto ex = sample_example(task, rng);
      if (excluded.count(inputs_of(ex))) continue;
      if (batch.size() + ex.prompt.size() + ex.answer.size() - 1 > cfg.batch_tokens &&
          batch.size() > 0) {
        break;
      }
      append_example(batch, ex);
    }
    Tape tape;
    double loss_value;
    {
      TapeScope scope(tape);
      auto loss = model.loss(batch);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        for (auto& p : params) p.tensor.set_requires_grad(false);
        throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(step));
      }
      tape.backward(loss);
    }
    adam.next_step();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto g = params[i].tensor.grad_data();
      if (g.empty()) continue;
      adam.update<T>(i, params[i].tensor.mutable_data(), g, cfg.learning_rate);
      params[i].tensor.clear_grad();
    }
    tokens_seen += batch.size();
    log.push_back({step, tokens_seen, loss_value});
  }
  for (auto& p : params) p.tensor.set_requires_grad(false);
  return log;
}

std::vector<double> SweepConfig::learning_rates() const {
  if (n_lrs == 0) throw ConfigError("sweep.n_lrs must be positive");
  if (!(lr_min > 0.0) || !(lr_max >= lr_min)) {
    throw ConfigError("sweep: need 0 < lr_min <= lr_max");
  }
  std::vector<double> out(n_lrs);
  for (std::size_t i = 0; i < n_lrs; ++i) {
    const double t = n_lrs == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n_lrs - 1);
    out[i] = std::exp(std::log(lr_min) + t * (std::log(lr_max) - std::log(lr_min)));
  }
  return out;
}

template <typename T>
std::size_t select_best(const std::vector<SweepCell<T>>& grid) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& c = grid[i];
    if (c.diverged) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = grid[*best];
    const double ca = c.validation.token_accuracy, ba = b.validation.token_accuracy;
    if (ca > ba || (ca == ba && (c.learning_rate < b.learning_rate ||
                                 (c.learning_rate == b.learning_rate && c.epoch < b.epoch)))) {
      best = i;
    }
  }
  if (!best) throw DivergenceError("lr_sweep: every run diverged");
  return *best;
}

template <typename T>
SweepResult<T> lr_sweep(const std::function<TransformerModel<T>()>& model_factory,
                        const TaskSplits& data, const SweepConfig& cfg,
                        const std::filesystem::path& out_dir) {
  const auto lrs = cfg.learning_rates();
  SweepResult<T> result;
  result.runs.resize(lrs.size());
  std::vector<std::string> errors(lrs.size());
  std::atomic<std::size_t> next{0};
  std::optional<ModelConfig> config;
  std::mutex config_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < lrs.size(); i = next++) {
      try {
        auto model = model_factory();
        {
          std::lock_guard lock(config_mu);
          if (!config) config = model.config();
        }
        TrainConfig tc = cfg.train;
        tc.learning_rate = lrs[i];
        RunOutputs outs;
        if (!out_dir.empty()) {
          std::ostringstream name;
          name << "lr_" << i;
          outs.dir = out_dir / name.str();
        }
        result.runs[i] = train_adapters(model, data, tc, outs);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, lrs.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (!e.empty()) throw ContractError("lr_sweep: run failed: " + e);
  }
  for (std::size_t i = 0; i < lrs.size(); ++i) {
    const auto& run = result.runs[i];
    for (const auto& rec : run.epochs) {
      result.grid.push_back({lrs[i], rec.epoch, rec.validation, false});
    }
    if (run.diverged) result.grid.push_back({lrs[i], run.epochs.size() + 1, Metrics{}, true});
  }
  const auto& best = result.grid[select_best(result.grid)];
  result.best_learning_rate = best.learning_rate;
  result.best_epoch = best.epoch;
  result.best_validation = best.validation;
  for (std::size_t i = 0; i < lrs.size(); ++i) {
    if (lrs[i] != best.learning_rate) continue;
    result.best_adapters = snapshot(result.runs[i].epochs.at(best.epoch - 1).adapters);
  }
  if (!out_dir.empty()) {
    std::ofstream grid(out_dir / "grid.csv");
    grid << "learning_rate,epoch,token_accuracy,exact_match,mean_loss,diverged\n"
         << std::setprecision(17);
    for (const auto& c : result.grid) {
      grid << c.learning_rate << ',' << c.epoch << ',' << c.validation.token_accuracy << ','
           << c.validation.exact_match << ',' << c.validation.mean_loss << ','
           << (c.diverged ? 1 : 0) << '\n';
    }
    std::vector<NamedTensor<T>> best_tensors;
    for (const auto& [name, t] : result.best_adapters) best_tensors.push_back({name, t});
    save_checkpoint(out_dir / "best.ckpt", *config, best_tensors,
                    Json{{"learning_rate", result.best_learning_rate},
                         {"epoch", result.best_epoch},
                         {"validation", to_json(result.best_validation)}});
  }
  return result;
}

ProtocolConfig ProtocolConfig::defaults() {
  ProtocolConfig c;
  c.model = ModelConfig::toy();
  c.model.adapter = AdapterSpec::preset(Variant::kFfbaAorB, 8);
  SyntheticTask copy;
  copy.separator = 1;
  copy.distinct = true;
  SyntheticTask reverse = copy;
  reverse.kind = TaskKind::kReverse;
  reverse.separator = 2;
  c.pretrain_tasks = {copy, reverse};
  c.task = copy;
  c.task.separator = 2;
  c.sweep.train.batch_tokens = 1024;
  return c;
}

namespace {

void check_fits(const SyntheticTask& t, const ModelConfig& m, const std::string& what) {
  t.validate(m.vocab_size);
  if (2 * t.max_len > m.max_seq_len) {
    throw ConfigError(what + ": sequences of " + std::to_string(2 * t.max_len) +
                      " tokens exceed max_seq_len " + std::to_string(m.max_seq_len));
  }
}

void write_steps(const std::filesystem::path& path, const std::vector<StepLog>& steps) {
  std::ofstream out(path);
  out << "step,tokens_seen,loss\n" << std::setprecision(17);
  for (const auto& s : steps) out << s.step << ',' << s.tokens_seen << ',' << s.loss << '\n';
}

}  // namespace

template <typename T>
ProtocolResult<T> run_protocol(const ProtocolConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.model.validate();
  cfg.model.adapter.validate();
  if (!cfg.model.adapter.has_adapters()) throw ConfigError("protocol: the adapter variant is none");
  if (cfg.pretrain_tasks.empty()) throw ConfigError("protocol.pretrain_tasks is empty");
  for (const auto& t : cfg.pretrain_tasks) check_fits(t, cfg.model, "protocol.pretrain_tasks");
  check_fits(cfg.task, cfg.model, "protocol.task");

  ProtocolResult<T> r;
  const TaskSplits splits = make_splits(cfg.task);
  std::vector<Example> held_out = splits.validation;
  held_out.insert(held_out.end(), splits.test.begin(), splits.test.end());

  ModelConfig base_cfg = cfg.model;
  base_cfg.adapter = AdapterSpec{};
  TransformerModel<T> base(base_cfg, cfg.seed);
  r.pretrain_log = pretrain_base(base, cfg.pretrain_tasks, cfg.pretrain, held_out);
  r.base_hash_before = base.base().hash();

  const std::size_t eval_tokens = cfg.sweep.train.batch_tokens;
  auto factory = [&] { return base.with_adapters(cfg.model.adapter, cfg.seed); };
  r.initial_test = evaluate(factory(), splits.test, eval_tokens);
  r.sweep = lr_sweep<T>(factory, splits, cfg.sweep,
                        out_dir.empty() ? std::filesystem::path{} : out_dir / "sweep");
  r.base_hash_after = base.base().hash();
  auto selected = base.with_adapter_tensors(cfg.model.adapter, snapshot(r.sweep.best_adapters));
  r.selected_test = evaluate(selected, splits.test, eval_tokens);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_checkpoint(out_dir / "base.ckpt", base_cfg, base.base().named(),
                    Json{{"pretrain_steps", cfg.pretrain.steps}});
    write_steps(out_dir / "pretrain_loss.csv", r.pretrain_log);
    Json summary{{"config", to_json(cfg)},
                 {"pretrain_final_loss", r.pretrain_log.empty() ? 0.0 : r.pretrain_log.back().loss},
                 {"base_hash_before", r.base_hash_before},
                 {"base_hash_after", r.base_hash_after},
                 {"initial_test", to_json(r.initial_test)},
                 {"best_learning_rate", r.sweep.best_learning_rate},
                 {"best_epoch", r.sweep.best_epoch},
                 {"best_validation", to_json(r.sweep.best_validation)},
                 {"selected_test", to_json(r.selected_test)}};
    std::ofstream(out_dir / "summary.json") << summary.dump(2) << '\n';
  }
  return r;
}

Json to_json(const Metrics& m) {
  return Json{{"token_accuracy", m.token_accuracy},
              {"exact_match", m.exact_match},
              {"mean_loss", m.mean_loss},
              {"examples", m.examples}};
}

Json to_json(const SyntheticTask& t) {
  return Json{{"kind", task_kind_name(t.kind)}, {"min_len", t.min_len},
              {"max_len", t.max_len},          {"symbol_begin", t.symbol_begin},
              {"n_symbols", t.n_symbols},      {"separator", t.separator},
              {"distinct", t.distinct},        {"train_size", t.train_size},    {"validation_size", t.validation_size},
              {"test_size", t.test_size},      {"seed", t.seed}};
}

SyntheticTask synthetic_task_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  SyntheticTask t;
  std::string kind = task_kind_name(t.kind);
  o.read("kind", kind);
  try {
    t.kind = parse_task_kind(kind);
  } catch (const ConfigError& e) {
    throw ConfigError(o.key_path("kind") + ": " + e.what());
  }
  o.read("min_len", t.min_len);
  o.read("max_len", t.max_len);
  o.read("symbol_begin", t.symbol_begin);
  o.read("n_symbols", t.n_symbols);
  o.read("separator", t.separator);
  o.read("distinct", t.distinct);
  o.read("train_size", t.train_size);
  o.read("validation_size", t.validation_size);
  o.read("test_size", t.test_size);
  o.read("seed", t.seed);
  o.finish();
  return t;
}

Json to_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"epochs", c.epochs},
              {"batch_tokens", c.batch_tokens},
              {"seed", c.seed},
              {"schedule", c.schedule},
              {"optimizer", c.optimizer}};
}

TrainConfig train_config_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  TrainConfig c;
  o.read("learning_rate", c.learning_rate);
  o.read("epochs", c.epochs);
  o.read("batch_tokens", c.batch_tokens);
  o.read("seed", c.seed);
  o.read("schedule", c.schedule);
  o.read("optimizer", c.optimizer);
  o.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

Json to_json(const PretrainConfig& c) {
  return Json{{"steps", c.steps},
              {"batch_tokens", c.batch_tokens},
              {"learning_rate", c.learning_rate},
              {"seed", c.seed}};
}

PretrainConfig pretrain_config_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  PretrainConfig c;
  o.read("steps", c.steps);
  o.read("batch_tokens", c.batch_tokens);
  o.read("learning_rate", c.learning_rate);
  o.read("seed", c.seed);
  o.finish();
  if (c.batch_tokens == 0) throw ConfigError(o.key_path("batch_tokens") + " must be positive");
  if (!(c.learning_rate > 0.0)) throw ConfigError(o.key_path("learning_rate") + " must be positive");
  return c;
}

Json to_json(const SweepConfig& c) {
  return Json{{"lr_min", c.lr_min},
              {"lr_max", c.lr_max},
              {"n_lrs", c.n_lrs},
              {"jobs", c.jobs},
              {"train", to_json(c.train)}};
}

SweepConfig sweep_config_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  SweepConfig c;
  o.read("lr_min", c.lr_min);
  o.read("lr_max", c.lr_max);
  o.read("n_lrs", c.n_lrs);
  o.read("jobs", c.jobs);
  if (const Json* t = o.child("train")) c.train = train_config_from_json(*t, o.key_path("train"));
  o.finish();
  try {
    c.learning_rates();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

Json to_json(const ProtocolConfig& c) {
  Json tasks = Json::array();
  for (const auto& t : c.pretrain_tasks) tasks.push_back(to_json(t));
  return Json{{"model", to_json(c.model)},   {"adapter", to_json(c.model.adapter)},
              {"seed", c.seed},              {"pretrain_tasks", tasks},
              {"pretrain", to_json(c.pretrain)}, {"task", to_json(c.task)},
              {"sweep", to_json(c.sweep)}};
}

ProtocolConfig protocol_config_from_json(const Json& j, const std::string& path) {
  StrictObject o(j, path);
  ProtocolConfig c = ProtocolConfig::defaults();
  if (const Json* m = o.child("model")) {
    const AdapterSpec keep = c.model.adapter;
    c.model = model_config_from_json(*m, o.key_path("model"));
    c.model.adapter = keep;
  }
  if (const Json* a = o.child("adapter")) c.model.adapter = adapter_spec_from_json(*a, o.key_path("adapter"));
  o.read("seed", c.seed);
  if (const Json* ts = o.child("pretrain_tasks")) {
    if (!ts->is_array()) throw ConfigError(o.key_path("pretrain_tasks") + " must be an array");
    c.pretrain_tasks.clear();
    for (std::size_t i = 0; i < ts->size(); ++i) {
      c.pretrain_tasks.push_back(synthetic_task_from_json(
          (*ts)[i], o.key_path("pretrain_tasks") + "[" + std::to_string(i) + "]"));
    }
  }
  if (const Json* p = o.child("pretrain")) c.pretrain = pretrain_config_from_json(*p, o.key_path("pretrain"));
  if (const Json* t = o.child("task")) c.task = synthetic_task_from_json(*t, o.key_path("task"));
  if (const Json* s = o.child("sweep")) c.sweep = sweep_config_from_json(*s, o.key_path("sweep"));
  o.finish();
  return c;
}

#define FLORA_INSTANTIATE_TRAIN(T)                                                             \
  template Metrics evaluate(const TransformerModel<T>&, const std::vector<Example>&,            \
                            std::size_t);                                                      \
  template TrainResult<T> train_adapters(TransformerModel<T>&, const TaskSplits&,              \
                                         const TrainConfig&, const RunOutputs&);               \
  template std::vector<StepLog> pretrain_base(TransformerModel<T>&,                            \
                                              const std::vector<SyntheticTask>&,               \
                                              const PretrainConfig&,                           \
                                              const std::vector<Example>&);                    \
  template std::size_t select_best(const std::vector<SweepCell<T>>&);                          \
  template SweepResult<T> lr_sweep(const std::function<TransformerModel<T>()>&,                \
                                   const TaskSplits&, const SweepConfig&,                      \
                                   const std::filesystem::path&);                      \
  template ProtocolResult<T> run_protocol(const ProtocolConfig&, const std::filesystem::path&);

FLORA_INSTANTIATE_TRAIN(float)
FLORA_INSTANTIATE_TRAIN(double)

#undef FLORA_INSTANTIATE_TRAIN

}  // namespace flora
