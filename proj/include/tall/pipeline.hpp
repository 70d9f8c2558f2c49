// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// The seven-stage pipeline:
//   1 frozen LR->HR encoder        5 adapter2
//   2 adapter1                     6 bridge2 (self-attention)
//   3 bridge1 (causal + cross)     7 frozen HR->LR decoder and lm_head
//   4 frozen LLM blocks
// Only adapter1, bridge1, adapter2 and bridge2 are trained.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tall/models.hpp"
#include "tall/sampler.hpp"
#include "tall/trainer.hpp"
#include "tall/world.hpp"

namespace tall {

inline constexpr std::array<const char*, 4> kTallTrainable = {"adapter1", "bridge1", "adapter2", "bridge2"};
inline constexpr std::array<const char*, 4> kTallFrozen = {"encoder", "llm", "decoder", "lm_head"};

struct TallConfig {
  /// Stage 1 is this translator's encoder.
  TranslatorConfig lr2hr;
  LlmConfig llm;
  /// Stage 7 is this translator's decoder and output head.
  TranslatorConfig hr2lr;
  AdapterSpec adapter1{64, 128, 96};
  TransformerConfig bridge1{1, 96, 4, 192, true, true, 96, 64};
  AdapterSpec adapter2{96, 128, 64};
  TransformerConfig bridge2{1, 64, 4, 128, false, false, 0, 64};

  /// Throws ConfigError naming the first stage whose widths do not line up.
  void validate() const {
    auto fail = [](int stage, const std::string& msg) {
      throw ConfigError("stage " + std::to_string(stage) + ": " + msg);
    };
    auto wrap = [&](int stage, auto&& check) {
      try {
        check();
      } catch (const Error& e) {
        fail(stage, e.what());
      }
    };
    wrap(1, [&] { lr2hr.validate(); });
    wrap(2, [&] { adapter1.validate(); });
    if (adapter1.d_in != lr2hr.d_model) {
      fail(2, "adapter1.d_in " + std::to_string(adapter1.d_in) + " != encoder width " + std::to_string(lr2hr.d_model));
    }
    if (adapter1.d_out != llm.d_model) {
      fail(2, "adapter1.d_out " + std::to_string(adapter1.d_out) + " != LLM width " + std::to_string(llm.d_model));
    }
    wrap(3, [&] { bridge1.validate(); });
    if (!bridge1.causal || !bridge1.cross_attention) fail(3, "bridge1 must be causal with cross-attention");
    if (bridge1.d_model != llm.d_model) {
      fail(3, "bridge1.d_model " + std::to_string(bridge1.d_model) + " != LLM width " + std::to_string(llm.d_model));
    }
    if (bridge1.cross_width() != adapter1.d_out) {
      fail(3, "bridge1 cross width " + std::to_string(bridge1.cross_width()) + " != adapter1.d_out " +
                  std::to_string(adapter1.d_out));
    }
    wrap(4, [&] { llm.validate(); });
    wrap(5, [&] { adapter2.validate(); });
    if (adapter2.d_in != llm.d_model) {
      fail(5, "adapter2.d_in " + std::to_string(adapter2.d_in) + " != LLM width " + std::to_string(llm.d_model));
    }
    wrap(6, [&] { bridge2.validate(); });
    if (bridge2.causal || bridge2.cross_attention) fail(6, "bridge2 must be bidirectional without cross-attention");
    if (bridge2.d_model != adapter2.d_out) {
      fail(6, "bridge2.d_model " + std::to_string(bridge2.d_model) + " != adapter2.d_out " +
                  std::to_string(adapter2.d_out));
    }
    wrap(7, [&] { hr2lr.validate(); });
    if (hr2lr.d_model != bridge2.d_model) {
      fail(7, "decoder cross width " + std::to_string(hr2lr.d_model) + " != bridge2.d_model " +
                  std::to_string(bridge2.d_model));
    }
  }
  bool operator==(const TallConfig&) const = default;
};

/// Trainable parameter count of the four inserted modules.
inline std::size_t tall_trainable_param_count(const TallConfig& c) {
  return adapter_param_count(c.adapter1) + transformer_stack_param_count(c.bridge1) +
         adapter_param_count(c.adapter2) + transformer_stack_param_count(c.bridge2);
}

/// Registers fresh adapters and bridges in `store`.
inline void init_tall_trainable(ParamStore& store, const TallConfig& cfg, Rng& rng) {
  init_adapter(store, "adapter1", cfg.adapter1, rng);
  init_transformer_stack(store, "bridge1", cfg.bridge1, rng);
  init_adapter(store, "adapter2", cfg.adapter2, rng);
  init_transformer_stack(store, "bridge2", cfg.bridge2, rng);
}

/// Frozen backbones plus freshly initialized trainable modules.
inline ParamStore build_tall_store(const TallConfig& cfg, const ParamStore& lr2hr, const ParamStore& llm,
                                   const ParamStore& hr2lr, Rng& rng) {
  cfg.validate();
  ParamStore store;
  store.import_from(lr2hr, "encoder", true);
  store.import_from(llm, "llm", true);
  store.import_from(hr2lr, "decoder", true);
  store.import_from(hr2lr, "lm_head", true);
  init_tall_trainable(store, cfg, rng);
  return store;
}

/// Refuses stores whose backbones are missing or trainable, or whose
/// trainable set differs from the four inserted modules.
inline void check_tall_store(const ParamStore& store) {
  for (const char* prefix : kTallFrozen) {
    const auto c = store.counts(prefix);
    if (c.total == 0) throw ContractError(std::string("backbone '") + prefix + "' is missing");
    if (c.trainable != 0) throw ContractError(std::string("backbone '") + prefix + "' is not frozen");
  }
  std::size_t inserted = 0;
  for (const char* prefix : kTallTrainable) {
    const auto c = store.counts(prefix);
    if (c.total == 0) throw ContractError(std::string("module '") + prefix + "' is missing");
    if (c.trainable != c.total) throw ContractError(std::string("module '") + prefix + "' is partly frozen");
    inserted += c.total;
  }
  if (store.counts().trainable != inserted) throw ContractError("parameters outside the inserted modules are trainable");
}

// ---------------------------------------------------------------------------
// Forward

/// Intermediate results of one pass, for inspection in tests.
struct TallTrace {
  Var encoder;   // stage 1
  Var adapter1;  // stage 2
  Var bridge1;   // stage 3
  Var llm;       // stage 4
  Var adapter2;  // stage 5
  Var bridge2;   // stage 6
  Var logits;    // stage 7
};

namespace detail {

inline void stage_check(int stage, bool ok, const std::string& msg) {
  if (!ok) throw ShapeError("stage " + std::to_string(stage) + ": " + msg);
}

}  // namespace detail

/// Stages 1-6 over an LR prefix and its HR translation (LLM ids, starting with BOS).
inline TallTrace tall_encode(Tape& tape, const ParamStore& store, const TallConfig& cfg,
                             std::span<const int> lr_prefix, std::span<const int> hr_tokens) {
  if (lr_prefix.empty()) throw ContractError("stage 1: empty LR input");
  if (hr_tokens.empty()) throw ContractError("stage 3: empty HR token sequence");
  TallTrace t{};
  const auto src = with_eos(lr_prefix);
  t.encoder = translator_encode(tape, store, cfg.lr2hr, src);
  detail::stage_check(2, t.encoder.cols() == cfg.adapter1.d_in,
                      "encoder output " + shape_str(t.encoder.shape()) + " vs adapter1.d_in " +
                          std::to_string(cfg.adapter1.d_in));
  t.adapter1 = adapter_forward(tape, store, "adapter1", cfg.adapter1, t.encoder);
  Var x = llm_embed(tape, store, hr_tokens);
  detail::stage_check(3, x.cols() == cfg.bridge1.d_model && t.adapter1.cols() == cfg.bridge1.cross_width(),
                      "bridge1 expects width " + std::to_string(cfg.bridge1.d_model) + " and memory width " +
                          std::to_string(cfg.bridge1.cross_width()));
  t.bridge1 = transformer_stack_forward(tape, store, "bridge1", cfg.bridge1, x, t.adapter1);
  detail::stage_check(4, t.bridge1.cols() == cfg.llm.d_model,
                      "bridge1 output " + shape_str(t.bridge1.shape()) + " vs LLM width " +
                          std::to_string(cfg.llm.d_model));
  t.llm = llm_hidden(tape, store, cfg.llm, t.bridge1);
  detail::stage_check(5, t.llm.cols() == cfg.adapter2.d_in,
                      "LLM output " + shape_str(t.llm.shape()) + " vs adapter2.d_in " +
                          std::to_string(cfg.adapter2.d_in));
  t.adapter2 = adapter_forward(tape, store, "adapter2", cfg.adapter2, t.llm);
  detail::stage_check(6, t.adapter2.cols() == cfg.bridge2.d_model,
                      "adapter2 output " + shape_str(t.adapter2.shape()) + " vs bridge2 width " +
                          std::to_string(cfg.bridge2.d_model));
  t.bridge2 = transformer_stack_forward(tape, store, "bridge2", cfg.bridge2, t.adapter2);
  return t;
}

/// All seven stages. Returns logits [len(teacher) x V_lr].
inline TallTrace tall_forward_trace(Tape& tape, const ParamStore& store, const TallConfig& cfg,
                                    std::span<const int> lr_prefix, std::span<const int> hr_tokens,
                                    std::span<const int> teacher) {
  if (teacher.empty()) throw ContractError("stage 7: empty teacher sequence");
  TallTrace t = tall_encode(tape, store, cfg, lr_prefix, hr_tokens);
  detail::stage_check(7, t.bridge2.cols() == cfg.hr2lr.d_model,
                      "bridge2 output " + shape_str(t.bridge2.shape()) + " vs decoder width " +
                          std::to_string(cfg.hr2lr.d_model));
  Var h = translator_decode(tape, store, cfg.hr2lr, teacher, t.bridge2);
  t.logits = translator_logits(tape, store, h);
  return t;
}

inline Var tall_forward(Tape& tape, const ParamStore& store, const TallConfig& cfg, std::span<const int> lr_prefix,
                        std::span<const int> hr_tokens, std::span<const int> teacher) {
  return tall_forward_trace(tape, store, cfg, lr_prefix, hr_tokens, teacher).logits;
}

// ---------------------------------------------------------------------------
// Examples and training

/// One training or evaluation item: an LR sentence split into prefix and final word.
struct TallExample {
  std::vector<int> lr_prefix;
  /// Greedy LR->HR translation of the prefix, in LLM ids, with a leading BOS.
  std::vector<int> hr_tokens;
  /// BOS + lr_prefix.
  std::vector<int> teacher;
  /// lr_prefix + final word; position i is the label of teacher position i.
  std::vector<int> labels;
  int final_word = kPad;
};

/// `lr_sentence` needs at least two tokens: a nonempty prefix and the final word.
inline TallExample make_tall_example(std::span<const int> lr_sentence, const ParamStore& lr2hr_store,
                                     const TranslatorConfig& lr2hr_cfg, const TokenSpaces& spaces,
                                     std::size_t max_translation = 0) {
  if (lr_sentence.size() < 2) throw ContractError("a sentence needs a prefix and a final word");
  TallExample ex;
  ex.lr_prefix.assign(lr_sentence.begin(), lr_sentence.end() - 1);
  ex.final_word = lr_sentence.back();
  const std::size_t limit = max_translation ? max_translation : ex.lr_prefix.size() + 4;
  const auto hr = greedy_translate(lr2hr_store, lr2hr_cfg, ex.lr_prefix, limit);
  ex.hr_tokens.push_back(kBos);
  for (int tok : hr) ex.hr_tokens.push_back(spaces.hr_to_llm(tok));
  ex.teacher = with_bos(ex.lr_prefix);
  ex.labels.assign(lr_sentence.begin(), lr_sentence.end());
  return ex;
}

inline std::vector<TallExample> make_tall_examples(std::span<const std::vector<int>> lr_sentences,
                                                   const ParamStore& lr2hr_store, const TranslatorConfig& lr2hr_cfg,
                                                   const TokenSpaces& spaces) {
  std::vector<TallExample> out;
  out.reserve(lr_sentences.size());
  for (const auto& s : lr_sentences) out.push_back(make_tall_example(s, lr2hr_store, lr2hr_cfg, spaces));
  return out;
}

/// Final-token cross-entropy of one example.
inline Var tall_example_loss(Tape& tape, const ParamStore& store, const TallConfig& cfg, const TallExample& ex) {
  Var logits = tall_forward(tape, store, cfg, ex.lr_prefix, ex.hr_tokens, ex.teacher);
  const std::size_t len = ex.teacher.size();
  return cross_entropy_last_token(logits, {ex.labels}, std::span<const std::size_t>(&len, 1));
}

/// Final-word logits over the LR vocabulary.
inline std::vector<double> tall_final_logits(const ParamStore& store, const TallConfig& cfg, const TallExample& ex) {
  Tape tape(Tape::Mode::inference);
  auto lv = tall_forward(tape, store, cfg, ex.lr_prefix, ex.hr_tokens, ex.teacher).data();
  const std::size_t v = cfg.hr2lr.tgt_vocab;
  return {lv.end() - static_cast<std::ptrdiff_t>(v), lv.end()};
}

/// Mean final-token loss, argmax accuracy and perplexity over `examples`.
inline EvalMetrics tall_evaluate(const ParamStore& store, const TallConfig& cfg, std::span<const TallExample> examples) {
  if (examples.empty()) throw ContractError("TALL evaluation set is empty");
  double total = 0.0;
  std::size_t hits = 0;
  for (const auto& ex : examples) {
    const auto logits = tall_final_logits(store, cfg, ex);
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    total += mx + std::log(z) - logits[static_cast<std::size_t>(ex.final_word)];
    if (static_cast<int>(argmax(logits)) == ex.final_word) ++hits;
  }
  const double loss = total / static_cast<double>(examples.size());
  return {loss, static_cast<double>(hits) / static_cast<double>(examples.size()), std::exp(loss)};
}

/// Trains the inserted modules of a store built by build_tall_store.
inline TrainResult train_tall(ParamStore& store, const TallConfig& cfg, std::span<const TallExample> train,
                              std::span<const TallExample> heldout, const TrainConfig& tc,
                              TrainState state = TrainState{},
                              std::function<void(const TrainState&)> on_eval = nullptr, std::size_t stop_at = 0) {
  cfg.validate();
  check_tall_store(store);
  TrainTask task;
  task.n_train = train.size();
  task.example_loss = [&](Tape& tape, std::size_t i) { return tall_example_loss(tape, store, cfg, train[i]); };
  if (!heldout.empty()) task.evaluate = [&] { return tall_evaluate(store, cfg, heldout); };
  task.on_eval = std::move(on_eval);
  task.stop_at = stop_at;
  return train_loop(store, task, tc, std::move(state));
}

/// Stages 1-6 on the prefix, then stage 7 over BOS + prefix; samples the next LR token.
inline int tall_predict_final_word(const ParamStore& store, const TallConfig& cfg, const TallExample& ex,
                                   const SamplerConfig& sampler, Rng& rng) {
  if (ex.lr_prefix.empty()) throw ContractError("empty input sentence");
  return static_cast<int>(sample_token(tall_final_logits(store, cfg, ex), sampler, rng));
}

}  // namespace tall
