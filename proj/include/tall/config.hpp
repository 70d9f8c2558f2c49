// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: a JSON document with sections world, models, train,
// sampler and paths. Missing keys keep their defaults; unknown keys are
// rejected by their full dotted path.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "tall/error.hpp"
#include "tall/hash.hpp"
#include "tall/pipeline.hpp"
#include "tall/sampler.hpp"
#include "tall/trainer.hpp"
#include "tall/world.hpp"

namespace tall {

struct WorldConfig {
  GrammarConfig grammar;
  std::uint64_t cipher_seed = 11;
  /// No substitution and no pair swap: LR and HR coincide up to id offsets.
  bool identity_cipher = false;
  /// Weight of an independently seeded grammar in the shifted evaluation set.
  double eval_shift = 0.3;
  std::uint64_t shift_seed = 77;
  /// Root of every corpus, initialization, ordering and sampling stream.
  std::uint64_t seed = 1;
  std::size_t translator_pairs = 20000;
  std::size_t translator_heldout = 300;
  std::size_t llm_sentences = 5000;
  std::size_t llm_heldout = 300;
  /// LR sentences for the final-word task (TALL, soft prompt, fine-tune, scratch).
  std::size_t task_sentences = 4000;
  std::size_t task_heldout = 300;
  std::size_t eval_sentences = 2000;
};

struct ModelsConfig {
  /// Both translators share this shape.
  TranslatorConfig translator;
  LlmConfig llm;
  AdapterSpec adapter1 = TallConfig{}.adapter1;
  TransformerConfig bridge1 = TallConfig{}.bridge1;
  AdapterSpec adapter2 = TallConfig{}.adapter2;
  TransformerConfig bridge2 = TallConfig{}.bridge2;
  std::size_t soft_prompt_len = 30;
};

struct TrainSection {
  TrainConfig translator{1e-3, 0.01, 100, 5, 32, 1.0, 1, 0, 0, 0};
  TrainConfig llm{1e-3, 0.01, 100, 3, 4, 1.0, 8, 0, 0, 0};
  TrainConfig tall{1e-3, 0.01, 0, 1, 32, 1.0, 1, 0, 500, 100};
  TrainConfig soft_prompt{5e-4, 0.01, 100, 1, 32, 1.0, 1, 0, 500, 100};
  TrainConfig finetune{2e-5, 0.01, 0, 1, 32, 1.0, 1, 0, 0, 0};
  TrainConfig scratch{5e-4, 0.01, 100, 3, 4, 1.0, 8, 0, 0, 0};
};

struct PathsConfig {
  std::string out_dir = "runs";
};

struct RunConfig {
  WorldConfig world;
  ModelsConfig models;
  TrainSection train;
  SamplerConfig sampler;
  PathsConfig paths;

  TranslatorConfig translator() const {
    TranslatorConfig t = models.translator;
    t.src_vocab = t.tgt_vocab = kNumSpecials + world.grammar.vocab_words;
    return t;
  }
  LlmConfig llm() const {
    LlmConfig l = models.llm;
    l.vocab = kNumSpecials + 2 * world.grammar.vocab_words;
    return l;
  }
  TallConfig tall() const {
    TallConfig c;
    c.lr2hr = c.hr2lr = translator();
    c.llm = llm();
    c.adapter1 = models.adapter1;
    c.bridge1 = models.bridge1;
    c.adapter2 = models.adapter2;
    c.bridge2 = models.bridge2;
    return c;
  }

  void validate() const;
};

// Every seed used by a run derives from world.seed and one of these tags.
enum class SeedTag : std::uint64_t {
  translator_corpus = 1,
  llm_corpus,
  task_corpus,
  eval_corpus,
  shifted_corpus,
  init_lr2hr = 11,
  init_hr2lr,
  init_llm,
  init_tall,
  init_soft_prompt,
  init_scratch,
  order_lr2hr = 21,
  order_hr2lr,
  order_llm,
  order_tall,
  order_soft_prompt,
  order_finetune,
  order_scratch,
};

inline std::uint64_t run_seed(const RunConfig& cfg, SeedTag tag) {
  return derive_seed(cfg.world.seed, static_cast<std::uint64_t>(tag));
}

/// A copy of `base` whose example order is seeded from the run.
inline TrainConfig seeded(const RunConfig& cfg, TrainConfig base, SeedTag tag) {
  base.seed = run_seed(cfg, tag);
  return base;
}

namespace detail {

class JsonWriter {
 public:
  explicit JsonWriter(nlohmann::json& j) : j_(j) { j_ = nlohmann::json::object(); }
  template <typename T>
  void operator()(const char* key, const T& value) {
    j_[key] = value;
  }
  template <typename S>
  void section(const char* key, const S& s) {
    JsonWriter child(j_[key]);
    fields(child, const_cast<S&>(s));
  }

 private:
  nlohmann::json& j_;
};

class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void operator()(const char* key, T& out) {
    known_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string name = join(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(name + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_unsigned()) throw ConfigError(name + ": expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(name + ": expected a number");
    } else {
      if (!it->is_string()) throw ConfigError(name + ": expected a string");
    }
    out = it->template get<T>();
  }

  template <typename S>
  void section(const char* key, S& s) {
    known_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    JsonReader child(*it, join(key));
    fields(child, s);
    child.finish();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!known_.count(key)) throw ConfigError("unknown config key '" + join(key) + "'");
    }
  }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> known_;
};

template <typename V>
void fields(V& v, GrammarConfig& c) {
  v("vocab_words", c.vocab_words);
  v("min_len", c.min_len);
  v("max_len", c.max_len);
  v("successors", c.successors);
  v("sharpness", c.sharpness);
  v("noise", c.noise);
  v("seed", c.seed);
}

template <typename V>
void fields(V& v, WorldConfig& c) {
  v.section("grammar", c.grammar);
  v("cipher_seed", c.cipher_seed);
  v("identity_cipher", c.identity_cipher);
  v("eval_shift", c.eval_shift);
  v("shift_seed", c.shift_seed);
  v("seed", c.seed);
  v("translator_pairs", c.translator_pairs);
  v("translator_heldout", c.translator_heldout);
  v("llm_sentences", c.llm_sentences);
  v("llm_heldout", c.llm_heldout);
  v("task_sentences", c.task_sentences);
  v("task_heldout", c.task_heldout);
  v("eval_sentences", c.eval_sentences);
}

template <typename V>
void fields(V& v, TranslatorConfig& c) {
  v("d_model", c.d_model);
  v("n_heads", c.n_heads);
  v("d_ff", c.d_ff);
  v("encoder_layers", c.encoder_layers);
  v("decoder_layers", c.decoder_layers);
  v("max_positions", c.max_positions);
}

template <typename V>
void fields(V& v, LlmConfig& c) {
  v("d_model", c.d_model);
  v("n_heads", c.n_heads);
  v("d_ff", c.d_ff);
  v("n_layers", c.n_layers);
  v("max_positions", c.max_positions);
}

template <typename V>
void fields(V& v, AdapterSpec& c) {
  v("d_in", c.d_in);
  v("d_hidden", c.d_hidden);
  v("d_out", c.d_out);
}

template <typename V>
void fields(V& v, TransformerConfig& c) {
  v("n_layers", c.n_layers);
  v("d_model", c.d_model);
  v("n_heads", c.n_heads);
  v("d_ff", c.d_ff);
  v("causal", c.causal);
  v("cross_attention", c.cross_attention);
  v("d_cross", c.d_cross);
  v("max_positions", c.max_positions);
}

template <typename V>
void fields(V& v, ModelsConfig& c) {
  v.section("translator", c.translator);
  v.section("llm", c.llm);
  v.section("adapter1", c.adapter1);
  v.section("bridge1", c.bridge1);
  v.section("adapter2", c.adapter2);
  v.section("bridge2", c.bridge2);
  v("soft_prompt_len", c.soft_prompt_len);
}

// The example-order seed is derived from world.seed and is not configurable here.
template <typename V>
void fields(V& v, TrainConfig& c) {
  v("learning_rate", c.learning_rate);
  v("weight_decay", c.weight_decay);
  v("warmup_steps", c.warmup_steps);
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("grad_clip_norm", c.grad_clip_norm);
  v("grad_accum_steps", c.grad_accum_steps);
  v("max_steps", c.max_steps);
  v("eval_every", c.eval_every);
}

template <typename V>
void fields(V& v, TrainSection& c) {
  v.section("translator", c.translator);
  v.section("llm", c.llm);
  v.section("tall", c.tall);
  v.section("soft_prompt", c.soft_prompt);
  v.section("finetune", c.finetune);
  v.section("scratch", c.scratch);
}

template <typename V>
void fields(V& v, SamplerConfig& c) {
  v("temperature", c.temperature);
  v("top_k", c.top_k);
  v("top_p", c.top_p);
  v("seed", c.seed);
}

template <typename V>
void fields(V& v, PathsConfig& c) {
  v("out_dir", c.out_dir);
}

template <typename V>
void fields(V& v, RunConfig& c) {
  v.section("world", c.world);
  v.section("models", c.models);
  v.section("train", c.train);
  v.section("sampler", c.sampler);
  v.section("paths", c.paths);
}

}  // namespace detail

inline void RunConfig::validate() const {
  const auto& w = world;
  if (w.translator_pairs == 0 || w.llm_sentences == 0 || w.task_sentences == 0 || w.eval_sentences == 0) {
    throw ConfigError("world: corpus sizes must be at least 1");
  }
  if (w.grammar.min_len < 2) throw ConfigError("world.grammar.min_len must be >= 2 (a prefix and a final word)");
  if (!(w.eval_shift >= 0.0 && w.eval_shift <= 1.0)) throw ConfigError("world.eval_shift must lie in [0, 1]");
  const TranslatorConfig t = translator();
  if (w.grammar.max_len + 2 > t.max_positions) {
    throw ConfigError("models.translator.max_positions must exceed world.grammar.max_len + 1");
  }
  const LlmConfig l = llm();
  if (models.soft_prompt_len == 0 || models.soft_prompt_len + w.grammar.max_len + 1 > l.max_positions) {
    throw ConfigError("models.soft_prompt_len must be >= 1 and fit the LLM positions with a full sentence");
  }
  tall().validate();
  for (const TrainConfig* tc : {&train.translator, &train.llm, &train.tall, &train.soft_prompt, &train.scratch}) {
    tc->validate();
  }
  if (train.finetune.batch_size == 0 || train.finetune.grad_accum_steps == 0) {
    throw ConfigError("train.finetune: batch_size and grad_accum_steps must be >= 1");
  }
  sampler.validate();
}

inline nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  detail::JsonWriter w(j);
  detail::fields(w, const_cast<RunConfig&>(cfg));
  return j;
}

/// Overlays `j` on the defaults; throws ConfigError on unknown keys or bad types.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  detail::JsonReader r(j, "");
  detail::fields(r, cfg);
  r.finish();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// The resolved configuration without output locations, which do not
/// affect any result.
inline nlohmann::json resolved_settings(const RunConfig& cfg) {
  nlohmann::json j = to_json(cfg);
  j.erase("paths");
  return j;
}

inline std::string config_hash(const RunConfig& cfg) {
  Fnv1a h;
  h.bytes(resolved_settings(cfg).dump());
  return h.hex();
}

}  // namespace tall
