// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// The two backbone families: an encoder-decoder translator and a
// decoder-only language model. Both tie their output projection to the
// target-side embedding table.

#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "tall/nn.hpp"
#include "tall/world.hpp"

namespace tall {

// ---------------------------------------------------------------------------
// Translator

struct TranslatorConfig {
  std::size_t src_vocab = 100;
  std::size_t tgt_vocab = 100;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t max_positions = 32;

  TransformerConfig encoder() const {
    return {encoder_layers, d_model, n_heads, d_ff, false, false, 0, max_positions};
  }
  TransformerConfig decoder() const {
    return {decoder_layers, d_model, n_heads, d_ff, true, true, d_model, max_positions};
  }
  void validate() const {
    if (src_vocab <= static_cast<std::size_t>(kNumSpecials) || tgt_vocab <= static_cast<std::size_t>(kNumSpecials)) {
      throw ConfigError("translator vocabularies must include words beyond the special tokens");
    }
    encoder().validate();
    decoder().validate();
  }
  bool operator==(const TranslatorConfig&) const = default;
};

/// Parameters: encoder.embed, encoder.{pos,layers.*,ln_f}, decoder.embed,
/// decoder.{pos,layers.*,ln_f}, lm_head.bias. The output weight is decoder.embed.
inline void init_translator(ParamStore& store, const TranslatorConfig& cfg, Rng& rng) {
  cfg.validate();
  store.add("encoder.embed", random_normal({cfg.src_vocab, cfg.d_model}, kInitStd, rng));
  init_transformer_stack(store, "encoder", cfg.encoder(), rng);
  store.add("decoder.embed", random_normal({cfg.tgt_vocab, cfg.d_model}, kInitStd, rng));
  init_transformer_stack(store, "decoder", cfg.decoder(), rng);
  store.add("lm_head.bias", Tensor({cfg.tgt_vocab}, 0.0));
}

inline std::size_t translator_param_count(const TranslatorConfig& cfg) {
  return cfg.src_vocab * cfg.d_model + transformer_stack_param_count(cfg.encoder()) +
         cfg.tgt_vocab * cfg.d_model + transformer_stack_param_count(cfg.decoder()) + cfg.tgt_vocab;
}

/// Source ids are used as given (callers append EOS). Returns [S x d].
inline Var translator_encode(Tape& tape, const ParamStore& store, const TranslatorConfig& cfg,
                             std::span<const int> src) {
  Var x = embedding(tape.param(store.at("encoder.embed")), src);
  return transformer_stack_forward(tape, store, "encoder", cfg.encoder(), x);
}

/// Decoder states for teacher inputs `tgt_in` attending to `memory`. Returns [T x d].
inline Var translator_decode(Tape& tape, const ParamStore& store, const TranslatorConfig& cfg,
                             std::span<const int> tgt_in, Var memory) {
  Var y = embedding(tape.param(store.at("decoder.embed")), tgt_in);
  return transformer_stack_forward(tape, store, "decoder", cfg.decoder(), y, memory);
}

/// h . decoder.embed^T + lm_head.bias
inline Var translator_logits(Tape& tape, const ParamStore& store, Var hidden) {
  return add_bias(matmul_nt(hidden, tape.param(store.at("decoder.embed"))), tape.param(store.at("lm_head.bias")));
}

inline std::vector<int> with_eos(std::span<const int> s) {
  std::vector<int> out(s.begin(), s.end());
  out.push_back(kEos);
  return out;
}

inline std::vector<int> with_bos(std::span<const int> s) {
  std::vector<int> out;
  out.reserve(s.size() + 1);
  out.push_back(kBos);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

/// Teacher-forced cross-entropy over every target position (tgt + EOS).
inline Var translator_loss(Tape& tape, const ParamStore& store, const TranslatorConfig& cfg,
                           std::span<const int> src, std::span<const int> tgt) {
  const auto src_eos = with_eos(src);
  Var memory = translator_encode(tape, store, cfg, src_eos);
  const auto tgt_in = with_bos(tgt);
  const auto labels = with_eos(tgt);
  Var logits = translator_logits(tape, store, translator_decode(tape, store, cfg, tgt_in, memory));
  return cross_entropy(logits, labels);
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Greedy decoding until EOS or `max_len` tokens; the result excludes EOS.
inline std::vector<int> greedy_translate(const ParamStore& store, const TranslatorConfig& cfg,
                                         std::span<const int> src, std::size_t max_len) {
  if (src.empty()) return {};
  const std::size_t limit = std::min(max_len, cfg.max_positions - 1);
  Tape enc_tape(Tape::Mode::inference);
  const auto src_eos = with_eos(src);
  const Tensor memory = enc_tape.value(translator_encode(enc_tape, store, cfg, src_eos));
  std::vector<int> out;
  std::vector<int> prefix{kBos};
  while (out.size() < limit) {
    Tape tape(Tape::Mode::inference);
    Var mem = tape.constant(memory);
    Var h = translator_decode(tape, store, cfg, prefix, mem);
    Var last = tape.constant(Tensor({1, cfg.d_model},
                                    std::vector<double>(h.data().end() - static_cast<std::ptrdiff_t>(cfg.d_model),
                                                        h.data().end())));
    Var logits = translator_logits(tape, store, last);
    const int next = static_cast<int>(argmax(logits.data()));
    if (next == kEos) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Causal language model

struct LlmConfig {
  std::size_t vocab = kNumSpecials + 2 * 96;
  std::size_t d_model = 96;
  std::size_t n_heads = 4;
  std::size_t d_ff = 192;
  std::size_t n_layers = 2;
  std::size_t max_positions = 64;

  TransformerConfig blocks() const { return {n_layers, d_model, n_heads, d_ff, true, false, 0, max_positions}; }
  void validate() const {
    if (vocab <= static_cast<std::size_t>(kNumSpecials)) throw ConfigError("LLM vocabulary is too small");
    blocks().validate();
  }
  bool operator==(const LlmConfig&) const = default;
};

/// Parameters: llm.embed, llm.pos, llm.layers.*, llm.ln_f. Output is tied to llm.embed.
inline void init_llm(ParamStore& store, const LlmConfig& cfg, Rng& rng) {
  cfg.validate();
  store.add("llm.embed", random_normal({cfg.vocab, cfg.d_model}, kInitStd, rng));
  init_transformer_stack(store, "llm", cfg.blocks(), rng);
}

inline std::size_t llm_param_count(const LlmConfig& cfg) {
  return cfg.vocab * cfg.d_model + transformer_stack_param_count(cfg.blocks());
}

inline Var llm_embed(Tape& tape, const ParamStore& store, std::span<const int> ids) {
  return embedding(tape.param(store.at("llm.embed")), ids);
}

/// Runs the blocks over input embeddings x[L x d] (positions are added here).
inline Var llm_hidden(Tape& tape, const ParamStore& store, const LlmConfig& cfg, Var x,
                      const std::optional<Mask>& mask = std::nullopt) {
  if (x.cols() != cfg.d_model) {
    throw ShapeError("LLM input " + shape_str(x.shape()) + " but d_model = " + std::to_string(cfg.d_model));
  }
  return transformer_stack_forward(tape, store, "llm", cfg.blocks(), x, std::nullopt, mask);
}

inline Var llm_logits(Tape& tape, const ParamStore& store, Var hidden) {
  return matmul_nt(hidden, tape.param(store.at("llm.embed")));
}

/// Next-token cross-entropy over BOS + s predicting s + EOS.
inline Var llm_loss(Tape& tape, const ParamStore& store, const LlmConfig& cfg, std::span<const int> sentence) {
  const auto input = with_bos(sentence);
  const auto labels = with_eos(sentence);
  Var h = llm_hidden(tape, store, cfg, llm_embed(tape, store, input));
  return cross_entropy(llm_logits(tape, store, h), labels);
}

/// Logits for the token following `context` (which should start with BOS).
inline std::vector<double> llm_next_logits(const ParamStore& store, const LlmConfig& cfg,
                                           std::span<const int> context) {
  Tape tape(Tape::Mode::inference);
  Var h = llm_hidden(tape, store, cfg, llm_embed(tape, store, context));
  auto hv = h.data();
  Var last = tape.constant(Tensor({1, cfg.d_model}, std::vector<double>(hv.end() - static_cast<std::ptrdiff_t>(cfg.d_model), hv.end())));
  auto lv = llm_logits(tape, store, last).data();
  return {lv.begin(), lv.end()};
}

}  // namespace tall
