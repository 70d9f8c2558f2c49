// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Missing-final-word evaluation of six approaches on LR sentences, plus the
// training routines for the baselines that need them.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tall/hash.hpp"
#include "tall/param_report.hpp"
#include "tall/pipeline.hpp"
#include "tall/pretrain.hpp"
#include "tall/sampler.hpp"

namespace tall {

enum class Approach { direct, finetuned, from_scratch, naive, soft_prompt, tall };

inline constexpr std::array<Approach, 6> kAllApproaches = {Approach::direct, Approach::finetuned,
                                                           Approach::from_scratch, Approach::naive,
                                                           Approach::soft_prompt, Approach::tall};

inline std::string_view approach_name(Approach a) {
  switch (a) {
    case Approach::direct: return "direct";
    case Approach::finetuned: return "finetuned";
    case Approach::from_scratch: return "from_scratch";
    case Approach::naive: return "naive";
    case Approach::soft_prompt: return "soft_prompt";
    case Approach::tall: return "tall";
  }
  return "?";
}

/// Accepts both the canonical names and the command-line spellings.
inline Approach parse_approach(std::string_view s) {
  if (s == "direct") return Approach::direct;
  if (s == "finetuned" || s == "finetune") return Approach::finetuned;
  if (s == "from_scratch" || s == "scratch") return Approach::from_scratch;
  if (s == "naive") return Approach::naive;
  if (s == "soft_prompt" || s == "soft-prompt") return Approach::soft_prompt;
  if (s == "tall") return Approach::tall;
  throw ConfigError("unknown approach '" + std::string(s) + "'");
}

struct EvalRecord {
  std::size_t example = 0;
  int gold = 0;
  int predicted = -1;
  bool correct = false;
  Approach approach = Approach::direct;
};

inline double accuracy(std::span<const EvalRecord> records) {
  if (records.empty()) throw ContractError("accuracy of an empty record set");
  std::size_t hits = 0;
  for (const auto& r : records) hits += r.correct ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

/// LR sentences whose final word is to be predicted.
struct EvalDataset {
  std::string name;
  std::vector<std::vector<int>> sentences;

  /// FNV-1a over the token stream, hex encoded.
  std::string hash() const {
    Fnv1a h;
    for (const auto& s : sentences) {
      h.u32(static_cast<std::uint32_t>(s.size()));
      for (int t : s) h.u32(static_cast<std::uint32_t>(t));
    }
    return h.hex();
  }
};

/// Scores `predict(i, prefix, rng)` against each sentence's final word. The
/// generator handed to example i depends only on (sampler seed, i).
inline std::vector<EvalRecord> evaluate_predictor(
    const EvalDataset& data, Approach approach, const SamplerConfig& sampler,
    const std::function<int(std::size_t, std::span<const int>, Rng&)>& predict) {
  if (data.sentences.empty()) throw ContractError("evaluation dataset '" + data.name + "' is empty");
  std::vector<EvalRecord> out;
  out.reserve(data.sentences.size());
  for (std::size_t i = 0; i < data.sentences.size(); ++i) {
    const auto& s = data.sentences[i];
    if (s.size() < 2) throw ContractError("evaluation sentence " + std::to_string(i) + " has no prefix");
    Rng rng = example_rng(sampler, i);
    const int pred = predict(i, std::span<const int>(s).first(s.size() - 1), rng);
    out.push_back({i, s.back(), pred, pred == s.back(), approach});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Direct (and the fine-tuned / from-scratch models, which are evaluated the same way)

/// Maps LR ids into and out of the language model's id space.
struct LlmRemap {
  std::function<int(int)> to_llm;
  /// -1 when the LLM id has no LR counterpart.
  std::function<int(int)> from_llm;

  static LlmRemap lr_range(const TokenSpaces& spaces) {
    return {[spaces](int lr) { return spaces.lr_to_llm(lr); }, [spaces](int id) { return spaces.llm_to_lr(id); }};
  }
};

inline std::vector<int> remap_context(std::span<const int> lr_prefix, const LlmRemap& remap) {
  std::vector<int> ctx{kBos};
  for (int t : lr_prefix) ctx.push_back(remap.to_llm(t));
  return ctx;
}

/// The LR prefix goes straight into the LLM; the sampled token is mapped back.
inline int predict_direct(const ParamStore& llm, const LlmConfig& cfg, const LlmRemap& remap,
                          std::span<const int> lr_prefix, const SamplerConfig& sampler, Rng& rng) {
  const auto logits = llm_next_logits(llm, cfg, remap_context(lr_prefix, remap));
  return remap.from_llm(static_cast<int>(sample_token(logits, sampler, rng)));
}

inline std::vector<EvalRecord> eval_direct(const ParamStore& llm, const LlmConfig& cfg, const LlmRemap& remap,
                                           const EvalDataset& data, const SamplerConfig& sampler,
                                           Approach tag = Approach::direct) {
  return evaluate_predictor(data, tag, sampler, [&](std::size_t, std::span<const int> prefix, Rng& rng) {
    return predict_direct(llm, cfg, remap, prefix, sampler, rng);
  });
}

/// Fine-tunes every LLM parameter on LR sentences (remapped into LLM ids).
/// Zero steps leaves the model untouched.
inline ParamStore finetune_llm(const ParamStore& base, const LlmConfig& cfg,
                               std::span<const std::vector<int>> lr_sentences, const LlmRemap& remap,
                               const TrainConfig& tc, std::size_t max_len = 128) {
  ParamStore store;
  store.import_from(base, "llm", false);
  if (tc.max_steps == 0 && tc.epochs == 0) return store;
  std::vector<std::vector<int>> seqs;
  seqs.reserve(lr_sentences.size());
  for (const auto& s : lr_sentences) {
    std::vector<int> m;
    for (std::size_t i = 0; i < s.size() && i + 1 < max_len; ++i) m.push_back(remap.to_llm(s[i]));
    seqs.push_back(std::move(m));
  }
  train_llm(store, cfg, seqs, {}, tc);
  return store;
}

/// A freshly initialized LLM trained only on LR sentences.
inline ParamStore train_scratch_llm(const LlmConfig& cfg, std::span<const std::vector<int>> lr_sentences,
                                    const LlmRemap& remap, const TrainConfig& tc, std::uint64_t init_seed) {
  ParamStore store;
  Rng rng(init_seed);
  init_llm(store, cfg, rng);
  std::vector<std::vector<int>> seqs;
  seqs.reserve(lr_sentences.size());
  for (const auto& s : lr_sentences) {
    std::vector<int> m;
    for (int t : s) m.push_back(remap.to_llm(t));
    seqs.push_back(std::move(m));
  }
  train_llm(store, cfg, seqs, {}, tc);
  return store;
}

// ---------------------------------------------------------------------------
// Naive translate-predict-translate

using TranslateFn = std::function<std::vector<int>(std::span<const int>)>;
/// Next-token logits over LLM ids for a context of LLM ids.
using NextLogitsFn = std::function<std::vector<double>(std::span<const int>)>;

struct NaiveParts {
  TranslateFn lr2hr;
  NextLogitsFn llm;
  TranslateFn hr2lr;
  /// HR token -> LLM id, and back (-1 if the LLM id is not an HR word).
  std::function<int(int)> hr_to_llm;
  std::function<int(int)> llm_to_hr;
};

inline NaiveParts naive_parts(const ParamStore& lr2hr, const TranslatorConfig& lr2hr_cfg, const ParamStore& llm,
                              const LlmConfig& llm_cfg, const ParamStore& hr2lr, const TranslatorConfig& hr2lr_cfg,
                              const TokenSpaces& spaces) {
  return {[&](std::span<const int> s) { return greedy_translate(lr2hr, lr2hr_cfg, s, s.size() + 4); },
          [&](std::span<const int> ctx) { return llm_next_logits(llm, llm_cfg, ctx); },
          [&](std::span<const int> s) { return greedy_translate(hr2lr, hr2lr_cfg, s, s.size() + 4); },
          [spaces](int t) { return spaces.hr_to_llm(t); }, [spaces](int id) { return spaces.llm_to_hr(id); }};
}

/// Translate the prefix, let the LLM extend it by one HR token, translate
/// the completed sentence back and take its last LR token. Returns -1 when a
/// step yields nothing usable.
inline int predict_naive(const NaiveParts& parts, std::span<const int> lr_prefix, const SamplerConfig& sampler,
                         Rng& rng) {
  std::vector<int> hr = parts.lr2hr(lr_prefix);
  std::vector<int> ctx{kBos};
  for (int t : hr) ctx.push_back(parts.hr_to_llm(t));
  const int next = parts.llm_to_hr(static_cast<int>(sample_token(parts.llm(ctx), sampler, rng)));
  if (next < 0) return -1;
  hr.push_back(next);
  const std::vector<int> lr = parts.hr2lr(hr);
  if (lr.empty()) return -1;
  return lr.back();
}

inline std::vector<EvalRecord> eval_naive(const NaiveParts& parts, const EvalDataset& data,
                                          const SamplerConfig& sampler) {
  return evaluate_predictor(data, Approach::naive, sampler, [&](std::size_t, std::span<const int> prefix, Rng& rng) {
    return predict_naive(parts, prefix, sampler, rng);
  });
}

// ---------------------------------------------------------------------------
// Soft prompt

inline constexpr const char* kSoftPromptName = "soft_prompt.embeddings";

/// Frozen LLM plus n_prompt trainable input vectors.
inline ParamStore build_soft_prompt_store(const ParamStore& llm, const LlmConfig& cfg, std::size_t n_prompt, Rng& rng) {
  if (n_prompt == 0) throw ConfigError("soft prompt needs at least one vector");
  if (n_prompt >= cfg.max_positions) throw ConfigError("soft prompt longer than the LLM position table");
  ParamStore store;
  store.import_from(llm, "llm", true);
  store.add(kSoftPromptName, random_normal({n_prompt, cfg.d_model}, kInitStd, rng));
  return store;
}

/// Causal mask over [prompt; input] where every row also sees every prompt position.
inline Mask soft_prompt_mask(std::size_t n_prompt, std::size_t len) {
  const std::size_t n = n_prompt + len;
  Mask m = Mask::causal(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n_prompt; ++j) m.set(i, j, true);
  }
  return m;
}

/// Logits at every position of [prompt; context], [(n_prompt + len) x V].
inline Var soft_prompt_logits(Tape& tape, const ParamStore& store, const LlmConfig& cfg,
                              std::span<const int> context) {
  Var prompt = tape.param(store.at(kSoftPromptName));
  const std::size_t n_prompt = prompt.rows();
  Var x = concat_rows(prompt, llm_embed(tape, store, context));
  Var h = llm_hidden(tape, store, cfg, x, soft_prompt_mask(n_prompt, context.size()));
  return llm_logits(tape, store, h);
}

struct SoftPromptExample {
  std::vector<int> context;  // BOS + remapped prefix
  int target = 0;            // remapped final word
};

inline std::vector<SoftPromptExample> make_soft_prompt_examples(std::span<const std::vector<int>> lr_sentences,
                                                                const LlmRemap& remap) {
  std::vector<SoftPromptExample> out;
  for (const auto& s : lr_sentences) {
    if (s.size() < 2) throw ContractError("a sentence needs a prefix and a final word");
    out.push_back({remap_context(std::span<const int>(s).first(s.size() - 1), remap), remap.to_llm(s.back())});
  }
  return out;
}

inline Var soft_prompt_loss(Tape& tape, const ParamStore& store, const LlmConfig& cfg, const SoftPromptExample& ex) {
  Var logits = soft_prompt_logits(tape, store, cfg, ex.context);
  const std::size_t len = logits.rows();
  std::vector<int> labels(len, kPad);
  labels.back() = ex.target;
  return cross_entropy_last_token(logits, {labels}, std::span<const std::size_t>(&len, 1));
}

/// Trains only the prompt vectors with the final-token loss.
inline TrainResult train_soft_prompt(ParamStore& store, const LlmConfig& cfg,
                                     std::span<const SoftPromptExample> train, const TrainConfig& tc) {
  if (store.counts().trainable != store.at(kSoftPromptName).numel()) {
    throw ContractError("soft prompt store must train only the prompt vectors");
  }
  TrainTask task;
  task.n_train = train.size();
  task.example_loss = [&](Tape& tape, std::size_t i) { return soft_prompt_loss(tape, store, cfg, train[i]); };
  return train_loop(store, task, tc);
}

inline int predict_soft_prompt(const ParamStore& store, const LlmConfig& cfg, const LlmRemap& remap,
                               std::span<const int> lr_prefix, const SamplerConfig& sampler, Rng& rng) {
  Tape tape(Tape::Mode::inference);
  auto lv = soft_prompt_logits(tape, store, cfg, remap_context(lr_prefix, remap)).data();
  auto last = lv.subspan(lv.size() - cfg.vocab);
  return remap.from_llm(static_cast<int>(sample_token(last, sampler, rng)));
}

inline std::vector<EvalRecord> eval_soft_prompt(const ParamStore& store, const LlmConfig& cfg, const LlmRemap& remap,
                                                const EvalDataset& data, const SamplerConfig& sampler) {
  return evaluate_predictor(data, Approach::soft_prompt, sampler,
                            [&](std::size_t, std::span<const int> prefix, Rng& rng) {
                              return predict_soft_prompt(store, cfg, remap, prefix, sampler, rng);
                            });
}

// ---------------------------------------------------------------------------
// TALL

inline std::vector<EvalRecord> eval_tall(const ParamStore& store, const TallConfig& cfg, const ParamStore& lr2hr,
                                         const TokenSpaces& spaces, const EvalDataset& data,
                                         const SamplerConfig& sampler) {
  return evaluate_predictor(data, Approach::tall, sampler, [&](std::size_t, std::span<const int> prefix, Rng& rng) {
    std::vector<int> sentence(prefix.begin(), prefix.end());
    sentence.push_back(kPad);
    const TallExample ex = make_tall_example(sentence, lr2hr, cfg.lr2hr, spaces);
    return tall_predict_final_word(store, cfg, ex, sampler, rng);
  });
}

// ---------------------------------------------------------------------------
// Results table

struct ResultRow {
  std::string dataset;
  Approach approach = Approach::direct;
  std::string model;
  std::size_t correct = 0;
  std::size_t total = 0;

  /// Percent with two decimals, rounded half-up.
  std::string accuracy_percent() const {
    const std::string p = format_percent(correct, total, 2);
    return p.substr(0, p.size() - 1);
  }
};

struct ResultsTable {
  std::string config_hash;
  /// dataset name -> content hash
  std::vector<std::pair<std::string, std::string>> dataset_hashes;
  std::vector<ResultRow> rows;
};

inline ResultRow make_row(const std::string& dataset, const std::string& model, std::span<const EvalRecord> records) {
  if (records.empty()) throw ContractError("no records for dataset '" + dataset + "'");
  ResultRow row{dataset, records.front().approach, model, 0, records.size()};
  for (const auto& r : records) row.correct += r.correct ? 1 : 0;
  return row;
}

inline std::string format_results(const ResultsTable& t) {
  std::ostringstream os;
  os << "# config " << t.config_hash << "\n";
  for (const auto& [name, hash] : t.dataset_hashes) os << "# dataset " << name << " " << hash << "\n";
  os << std::left << std::setw(12) << "dataset" << std::setw(14) << "approach" << std::setw(14) << "model"
     << "accuracy_percent\n";
  for (const auto& r : t.rows) {
    os << std::setw(12) << r.dataset << std::setw(14) << approach_name(r.approach) << std::setw(14) << r.model
       << r.accuracy_percent() << "\n";
  }
  return os.str();
}

inline nlohmann::json to_json(const ResultsTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"dataset", r.dataset},
                    {"approach", std::string(approach_name(r.approach))},
                    {"model", r.model},
                    {"correct", r.correct},
                    {"total", r.total},
                    {"accuracy_percent", r.accuracy_percent()}});
  }
  nlohmann::json datasets = nlohmann::json::object();
  for (const auto& [name, hash] : t.dataset_hashes) datasets[name] = hash;
  return {{"config_hash", t.config_hash}, {"datasets", datasets}, {"rows", rows}};
}

}  // namespace tall
