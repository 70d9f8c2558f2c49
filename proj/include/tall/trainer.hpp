// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Mini-batch training loop shared by every model. Each example is recorded on
// its own tape and its gradient is added to the store in a fixed order, so a
// batch of b with k accumulation steps updates exactly like one batch of b*k.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tall/autograd.hpp"
#include "tall/optim.hpp"
#include "tall/param_store.hpp"
#include "tall/random.hpp"

namespace tall {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  /// 0 disables clipping.
  double grad_clip_norm = 1.0;
  std::size_t grad_accum_steps = 1;
  std::uint64_t seed = 1;
  /// Overrides epochs when nonzero.
  std::size_t max_steps = 0;
  /// Evaluate every this many updates; 0 evaluates once per epoch.
  std::size_t eval_every = 0;

  void validate() const {
    if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0) || !(grad_clip_norm >= 0.0)) {
      throw ConfigError("train: learning_rate, weight_decay and grad_clip_norm must be >= 0");
    }
    if (batch_size == 0 || grad_accum_steps == 0) throw ConfigError("train: batch_size and grad_accum_steps must be >= 1");
    if (epochs == 0 && max_steps == 0) throw ConfigError("train: need epochs >= 1 or max_steps >= 1");
  }
  bool operator==(const TrainConfig&) const = default;
};

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  double perplexity = 0.0;
};

struct MetricRecord {
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  std::optional<double> accuracy;
  std::optional<double> perplexity;
  double lr = 0.0;
  double grad_norm = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

inline nlohmann::json to_json(const MetricRecord& r, const std::string& config_hash) {
  nlohmann::json j = {{"step", r.step}, {"split", r.split}, {"loss", r.loss},
                      {"lr", r.lr},     {"grad_norm", r.grad_norm}, {"config_hash", config_hash}};
  j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
  j["perplexity"] = r.perplexity ? nlohmann::json(*r.perplexity) : nlohmann::json(nullptr);
  return j;
}

inline void write_metrics_jsonl(std::ostream& out, const std::vector<MetricRecord>& history,
                                const std::string& config_hash) {
  for (const auto& r : history) out << to_json(r, config_hash).dump() << '\n';
}

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  std::size_t step = 0;
  AdamW optimizer;
  double best_eval_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  /// Trainable values at the best evaluation so far.
  std::vector<std::pair<std::string, std::vector<double>>> best_values;
};

struct TrainTask {
  std::size_t n_train = 0;
  /// Records the loss of training example `index` on `tape`.
  std::function<Var(Tape& tape, std::size_t index)> example_loss;
  /// Held-out evaluation; optional.
  std::function<EvalMetrics()> evaluate;
  /// Called after each evaluation with the state at that point.
  std::function<void(const TrainState&)> on_eval;
  /// Stop after this many updates without touching the schedule (0 runs to
  /// the end). A stopped run keeps its current values.
  std::size_t stop_at = 0;
};

struct TrainResult {
  std::vector<MetricRecord> history;
  std::size_t steps = 0;
  double best_eval_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
};

inline std::size_t steps_per_epoch(const TrainConfig& cfg, std::size_t n_train) {
  const std::size_t per_update = cfg.batch_size * cfg.grad_accum_steps;
  return (n_train + per_update - 1) / per_update;
}

inline std::size_t total_steps(const TrainConfig& cfg, std::size_t n_train) {
  return cfg.max_steps ? cfg.max_steps : cfg.epochs * steps_per_epoch(cfg, n_train);
}

/// Example order for an epoch: a permutation seeded by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xE90C0000ULL + epoch));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

inline std::vector<std::pair<std::string, std::vector<double>>> snapshot_trainable(const ParamStore& store) {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  for (const auto& [name, e] : store) {
    if (!e.frozen) out.emplace_back(name, std::vector<double>(e.tensor.data().begin(), e.tensor.data().end()));
  }
  return out;
}

inline void restore_values(ParamStore& store, const std::vector<std::pair<std::string, std::vector<double>>>& values) {
  for (const auto& [name, v] : values) {
    auto dst = store.at(name).data();
    std::copy(v.begin(), v.end(), dst.begin());
  }
}

/// One optimizer update over the given examples. Returns (mean loss, pre-clip grad norm).
inline std::pair<double, double> train_update(ParamStore& store, const TrainTask& task, const TrainConfig& cfg,
                                              std::span<const std::size_t> examples, double lr, AdamW& opt) {
  store.zero_grad();
  const double seed = 1.0 / static_cast<double>(examples.size());
  double loss_sum = 0.0;
  for (std::size_t idx : examples) {
    Tape tape;
    Var loss = task.example_loss(tape, idx);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericalError("non-finite training loss " + std::to_string(value) + " at example " + std::to_string(idx));
    }
    loss_sum += value;
    tape.backward(loss, seed);
    store.accumulate_grads(tape);
  }
  const double norm = clip_grad_norm(store, cfg.grad_clip_norm);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
  opt.step(store, lr);
  return {loss_sum / static_cast<double>(examples.size()), norm};
}

/// Trains the non-frozen entries of `store`. When `task.evaluate` is set,
/// the values with the lowest evaluation loss are restored at the end.
inline TrainResult train_loop(ParamStore& store, const TrainTask& task, const TrainConfig& cfg,
                              TrainState state = TrainState{}) {
  cfg.validate();
  if (task.n_train == 0) throw ContractError("training set is empty");
  if (store.counts().trainable == 0) throw ContractError("nothing to train: every parameter is frozen");

  const std::size_t per_epoch = steps_per_epoch(cfg, task.n_train);
  const std::size_t total = total_steps(cfg, task.n_train);
  const std::size_t per_update = cfg.batch_size * cfg.grad_accum_steps;
  const std::size_t eval_every = cfg.eval_every ? cfg.eval_every : per_epoch;

  {
    AdamWConfig oc;
    oc.weight_decay = cfg.weight_decay;
    AdamW opt(oc);
    opt.restore(state.optimizer.steps(), state.optimizer.state());
    state.optimizer = std::move(opt);
  }

  TrainResult result;
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);

  auto run_eval = [&](std::size_t step, double lr) {
    const EvalMetrics m = task.evaluate();
    if (!std::isfinite(m.loss)) throw NumericalError("non-finite evaluation loss at step " + std::to_string(step));
    result.history.push_back({step, "eval", m.loss, m.accuracy, m.perplexity, lr, 0.0});
    if (m.loss < state.best_eval_loss) {
      state.best_eval_loss = m.loss;
      state.best_step = step;
      state.best_values = snapshot_trainable(store);
    }
    if (task.on_eval) task.on_eval(state);
  };

  const std::size_t last = task.stop_at ? std::min(task.stop_at, total) : total;
  while (state.step < last) {
    const std::size_t s = state.step;
    const std::size_t epoch = s / per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(cfg.seed, epoch, task.n_train);
      order_epoch = epoch;
    }
    const std::size_t begin = (s % per_epoch) * per_update;
    const std::size_t end = std::min(begin + per_update, task.n_train);
    const double lr = cosine_lr(s, total, cfg.learning_rate, cfg.warmup_steps);
    const auto [loss, norm] = train_update(store, task, cfg, std::span(order).subspan(begin, end - begin), lr,
                                           state.optimizer);
    ++state.step;
    result.history.push_back({state.step, "train", loss, std::nullopt, std::nullopt, lr, norm});
    if (task.evaluate && (state.step % eval_every == 0 || state.step == total)) run_eval(state.step, lr);
  }

  if (state.step == total && task.evaluate && !state.best_values.empty()) restore_values(store, state.best_values);
  result.steps = state.step;
  result.best_eval_loss = state.best_eval_loss;
  result.best_step = state.best_step;
  return result;
}

}  // namespace tall
