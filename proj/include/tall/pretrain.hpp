// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Training of the backbones that later stay frozen: the two translators and
// the causal language model.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "tall/models.hpp"
#include "tall/trainer.hpp"
#include "tall/world.hpp"

namespace tall {

enum class Direction { lr2hr, hr2lr };

inline const char* direction_name(Direction d) { return d == Direction::lr2hr ? "lr2hr" : "hr2lr"; }

inline const std::vector<int>& source_side(const BilingualPair& p, Direction d) {
  return d == Direction::lr2hr ? p.lr : p.hr;
}
inline const std::vector<int>& target_side(const BilingualPair& p, Direction d) {
  return d == Direction::lr2hr ? p.hr : p.lr;
}

/// Token-weighted mean teacher-forced loss of a translator on `pairs`.
inline double translator_eval_loss(const ParamStore& store, const TranslatorConfig& cfg,
                                   std::span<const BilingualPair> pairs, Direction dir) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& p : pairs) {
    Tape tape(Tape::Mode::inference);
    const auto& tgt = target_side(p, dir);
    const double loss = translator_loss(tape, store, cfg, source_side(p, dir), tgt).item();
    total += loss * static_cast<double>(tgt.size() + 1);
    tokens += tgt.size() + 1;
  }
  return total / static_cast<double>(tokens);
}

/// Fraction of pairs whose greedy translation equals the reference exactly.
inline double translator_exact_match(const ParamStore& store, const TranslatorConfig& cfg,
                                     std::span<const BilingualPair> pairs, Direction dir) {
  if (pairs.empty()) throw ContractError("exact match over an empty set");
  std::size_t hits = 0;
  for (const auto& p : pairs) {
    const auto& tgt = target_side(p, dir);
    if (greedy_translate(store, cfg, source_side(p, dir), tgt.size() + 4) == tgt) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

struct PretrainReport {
  TrainResult train;
  /// Translators: held-out greedy exact-match rate. LLM: held-out next-token accuracy.
  double heldout_accuracy = 0.0;
  double heldout_loss = 0.0;
  double heldout_perplexity = 0.0;
};

/// Trains every entry of `store` (already initialized by init_translator).
/// `exact_match_limit` caps how many held-out pairs are greedily decoded.
inline PretrainReport train_translator(ParamStore& store, const TranslatorConfig& cfg, Direction dir,
                                       std::span<const BilingualPair> train, std::span<const BilingualPair> heldout,
                                       const TrainConfig& tc, std::size_t exact_match_limit = 500) {
  if (train.empty()) throw ContractError("translator training corpus is empty");
  TrainTask task;
  task.n_train = train.size();
  task.example_loss = [&](Tape& tape, std::size_t i) {
    return translator_loss(tape, store, cfg, source_side(train[i], dir), target_side(train[i], dir));
  };
  if (!heldout.empty()) {
    task.evaluate = [&] {
      const double loss = translator_eval_loss(store, cfg, heldout, dir);
      return EvalMetrics{loss, 0.0, std::exp(loss)};
    };
  }
  PretrainReport report;
  report.train = train_loop(store, task, tc);
  if (!heldout.empty()) {
    report.heldout_loss = translator_eval_loss(store, cfg, heldout, dir);
    report.heldout_perplexity = std::exp(report.heldout_loss);
    report.heldout_accuracy =
        translator_exact_match(store, cfg, heldout.first(std::min(exact_match_limit, heldout.size())), dir);
  }
  return report;
}

struct LmEval {
  double loss = 0.0;
  double accuracy = 0.0;
  double perplexity = 0.0;
};

/// Token-weighted next-token loss, argmax accuracy and perplexity of the LLM.
inline LmEval llm_evaluate(const ParamStore& store, const LlmConfig& cfg,
                           std::span<const std::vector<int>> sentences) {
  if (sentences.empty()) throw ContractError("LLM evaluation set is empty");
  double total = 0.0;
  std::size_t tokens = 0, hits = 0;
  for (const auto& s : sentences) {
    Tape tape(Tape::Mode::inference);
    const auto input = with_bos(s);
    const auto labels = with_eos(s);
    Var logits = llm_logits(tape, store, llm_hidden(tape, store, cfg, llm_embed(tape, store, input)));
    total += cross_entropy(logits, labels).item() * static_cast<double>(labels.size());
    auto lv = logits.data();
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (static_cast<int>(argmax(lv.subspan(r * cfg.vocab, cfg.vocab))) == labels[r]) ++hits;
    }
    tokens += labels.size();
  }
  const double loss = total / static_cast<double>(tokens);
  return {loss, static_cast<double>(hits) / static_cast<double>(tokens), std::exp(loss)};
}

/// Trains the non-frozen entries of an LLM store on sentences already in
/// LLM id space, with next-token loss at every position.
inline PretrainReport train_llm(ParamStore& store, const LlmConfig& cfg, std::span<const std::vector<int>> train,
                                std::span<const std::vector<int>> heldout, const TrainConfig& tc) {
  if (train.empty()) throw ContractError("LLM training corpus is empty");
  TrainTask task;
  task.n_train = train.size();
  task.example_loss = [&](Tape& tape, std::size_t i) { return llm_loss(tape, store, cfg, train[i]); };
  if (!heldout.empty()) {
    task.evaluate = [&] {
      const LmEval e = llm_evaluate(store, cfg, heldout);
      return EvalMetrics{e.loss, e.accuracy, e.perplexity};
    };
  }
  PretrainReport report;
  report.train = train_loop(store, task, tc);
  if (!heldout.empty()) {
    const LmEval e = llm_evaluate(store, cfg, heldout);
    report.heldout_loss = e.loss;
    report.heldout_accuracy = e.accuracy;
    report.heldout_perplexity = e.perplexity;
  }
  return report;
}

}  // namespace tall
