// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end runs on the toy world: corpora, backbone pretraining, the
// trained approaches, evaluation tables, resumable TALL training and the
// multi-seed benchmark.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tall/checkpoint.hpp"
#include "tall/config.hpp"
#include "tall/eval.hpp"
#include "tall/hash.hpp"
#include "tall/pipeline.hpp"
#include "tall/pretrain.hpp"

namespace tall {

// ---------------------------------------------------------------------------
// Corpora

struct World {
  ToyGrammar grammar;
  Cipher cipher;
  TokenSpaces spaces;
  std::vector<BilingualPair> translator_train, translator_heldout;
  /// HR sentences in LLM ids.
  std::vector<std::vector<int>> llm_train, llm_heldout;
  /// LR sentences for the final-word task.
  std::vector<std::vector<int>> task_train, task_heldout;
  EvalDataset in_domain, shifted;

  const EvalDataset& dataset(std::string_view name) const {
    if (name == in_domain.name) return in_domain;
    if (name == shifted.name) return shifted;
    throw ConfigError("unknown dataset '" + std::string(name) + "' (expected in_domain or shifted)");
  }
};

inline World build_world(const RunConfig& cfg) {
  cfg.validate();
  const WorldConfig& w = cfg.world;
  World world{ToyGrammar(w.grammar), Cipher(w.grammar.vocab_words, w.cipher_seed, w.identity_cipher),
              TokenSpaces(w.grammar.vocab_words), {}, {}, {}, {}, {}, {}, {"in_domain", {}}, {"shifted", {}}};

  auto pairs = generate_corpus(run_seed(cfg, SeedTag::translator_corpus), w.translator_pairs + w.translator_heldout,
                               world.grammar, world.cipher);
  world.translator_train.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(w.translator_pairs));
  world.translator_heldout.assign(pairs.begin() + static_cast<std::ptrdiff_t>(w.translator_pairs), pairs.end());

  const auto llm_pairs =
      generate_corpus(run_seed(cfg, SeedTag::llm_corpus), w.llm_sentences + w.llm_heldout, world.grammar, world.cipher);
  for (std::size_t i = 0; i < llm_pairs.size(); ++i) {
    std::vector<int> ids;
    for (int t : llm_pairs[i].hr) ids.push_back(world.spaces.hr_to_llm(t));
    (i < w.llm_sentences ? world.llm_train : world.llm_heldout).push_back(std::move(ids));
  }

  const auto task = generate_corpus(run_seed(cfg, SeedTag::task_corpus), w.task_sentences + w.task_heldout,
                                    world.grammar, world.cipher);
  for (std::size_t i = 0; i < task.size(); ++i) {
    (i < w.task_sentences ? world.task_train : world.task_heldout).push_back(task[i].lr);
  }

  // Evaluation sentences never appear in the task corpus.
  for (const auto& p : generate_corpus(run_seed(cfg, SeedTag::eval_corpus), w.eval_sentences, world.grammar,
                                       world.cipher, task)) {
    world.in_domain.sentences.push_back(p.lr);
  }
  const ToyGrammar shifted = ToyGrammar::shifted(world.grammar, w.eval_shift, w.shift_seed);
  for (const auto& p :
       generate_corpus(run_seed(cfg, SeedTag::shifted_corpus), w.eval_sentences, shifted, world.cipher, task)) {
    world.shifted.sentences.push_back(p.lr);
  }
  return world;
}

// ---------------------------------------------------------------------------
// Artifacts

/// Checkpoint kinds, also the pretrain subcommand names.
inline constexpr const char* kKindLr2hr = "translator-lr2hr";
inline constexpr const char* kKindHr2lr = "translator-hr2lr";
inline constexpr const char* kKindLlm = "llm";
inline constexpr const char* kKindTall = "tall";
inline constexpr const char* kKindTallState = "tall-state";
inline constexpr const char* kKindSoftPrompt = "soft-prompt";
inline constexpr const char* kKindFinetuned = "llm-finetuned";
inline constexpr const char* kKindScratch = "llm-scratch";

inline nlohmann::json artifact_meta(const RunConfig& cfg, const std::string& kind, std::size_t step) {
  return {{"kind", kind},
          {"config", resolved_settings(cfg)},
          {"config_hash", config_hash(cfg)},
          {"seed", cfg.world.seed},
          {"step", step}};
}

/// Shape-relevant part of the config that a checkpoint of `kind` must agree with.
inline nlohmann::json model_signature(const RunConfig& cfg, const std::string& kind) {
  const nlohmann::json c = to_json(cfg);
  nlohmann::json sig = {{"vocab_words", cfg.world.grammar.vocab_words}};
  if (kind == kKindLr2hr || kind == kKindHr2lr) {
    sig["translator"] = c["models"]["translator"];
  } else if (kind == kKindLlm || kind == kKindFinetuned || kind == kKindScratch) {
    sig["llm"] = c["models"]["llm"];
  } else if (kind == kKindSoftPrompt) {
    sig["llm"] = c["models"]["llm"];
    sig["soft_prompt_len"] = cfg.models.soft_prompt_len;
  } else {
    sig["models"] = c["models"];
  }
  return sig;
}

inline void save_artifact(const ParamStore& store, const RunConfig& cfg, const std::string& kind, std::size_t step,
                          const std::filesystem::path& path, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json meta = artifact_meta(cfg, kind, step);
  meta["signature"] = model_signature(cfg, kind);
  for (auto& [k, v] : extra.items()) meta[k] = v;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_checkpoint(store, meta, path);
}

/// Loads a checkpoint and checks its kind and model shape against `cfg`.
inline Checkpoint load_artifact(const std::filesystem::path& path, const RunConfig& cfg, const std::string& kind) {
  Checkpoint ck = load_checkpoint(path);
  try {
    require_meta(ck.meta, "kind", kind);
    require_meta(ck.meta, "signature", model_signature(cfg, kind));
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Backbones

inline ParamStore pretrain_translator(const RunConfig& cfg, const World& world, Direction dir,
                                      PretrainReport* report = nullptr) {
  const bool fwd = dir == Direction::lr2hr;
  ParamStore store;
  Rng rng(run_seed(cfg, fwd ? SeedTag::init_lr2hr : SeedTag::init_hr2lr));
  init_translator(store, cfg.translator(), rng);
  const TrainConfig tc = seeded(cfg, cfg.train.translator, fwd ? SeedTag::order_lr2hr : SeedTag::order_hr2lr);
  PretrainReport r = train_translator(store, cfg.translator(), dir, world.translator_train, world.translator_heldout, tc);
  if (report) *report = std::move(r);
  return store;
}

inline ParamStore pretrain_llm(const RunConfig& cfg, const World& world, PretrainReport* report = nullptr) {
  ParamStore store;
  Rng rng(run_seed(cfg, SeedTag::init_llm));
  init_llm(store, cfg.llm(), rng);
  PretrainReport r =
      train_llm(store, cfg.llm(), world.llm_train, world.llm_heldout, seeded(cfg, cfg.train.llm, SeedTag::order_llm));
  if (report) *report = std::move(r);
  return store;
}

// ---------------------------------------------------------------------------
// TALL training with resumable state

/// Resume state as a parameter store: current trainable values, AdamW
/// moments ("adamw.m.<name>", "adamw.v.<name>") and the best snapshot
/// ("best.<name>"). Scalars go in the metadata.
inline ParamStore train_state_store(const ParamStore& store, const TrainState& state) {
  ParamStore out;
  for (const auto& [name, e] : store) {
    if (e.frozen) continue;
    out.add(name, e.tensor);
    const auto it = state.optimizer.state().find(name);
    if (it != state.optimizer.state().end()) {
      out.add("adamw.m." + name, Tensor(e.tensor.shape(), it->second.m));
      out.add("adamw.v." + name, Tensor(e.tensor.shape(), it->second.v));
    }
  }
  for (const auto& [name, values] : state.best_values) out.add("best." + name, Tensor(store.at(name).shape(), values));
  return out;
}

inline nlohmann::json train_state_meta(const TrainState& state) {
  nlohmann::json best = std::isfinite(state.best_eval_loss) ? nlohmann::json(state.best_eval_loss) : nlohmann::json();
  return {{"adamw_steps", state.optimizer.steps()}, {"best_eval_loss", best}, {"best_step", state.best_step}};
}

/// Copies the saved values into `store` and rebuilds the training state.
inline TrainState restore_train_state(ParamStore& store, const Checkpoint& ck) {
  TrainState state;
  try {
    state.step = ck.meta.at("step").get<std::size_t>();
    state.best_step = ck.meta.at("best_step").get<std::size_t>();
    const auto& best = ck.meta.at("best_eval_loss");
    state.best_eval_loss = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
    std::map<std::string, AdamW::Moments> moments;
    for (const auto& [name, e] : store) {
      if (e.frozen) continue;
      if (!ck.store.contains(name)) throw CheckpointError(CheckpointError::Kind::config_mismatch, "state lacks " + name);
      const Tensor& v = ck.store.at(name);
      if (v.shape() != e.tensor.shape()) {
        throw CheckpointError(CheckpointError::Kind::config_mismatch, "state shape mismatch for " + name);
      }
      std::copy(v.data().begin(), v.data().end(), store.at(name).data().begin());
      if (ck.store.contains("adamw.m." + name)) {
        const auto m = ck.store.at("adamw.m." + name).data();
        const auto s = ck.store.at("adamw.v." + name).data();
        moments[name] = {{m.begin(), m.end()}, {s.begin(), s.end()}};
      }
      if (ck.store.contains("best." + name)) {
        const auto b = ck.store.at("best." + name).data();
        state.best_values.emplace_back(name, std::vector<double>(b.begin(), b.end()));
      }
    }
    state.optimizer.restore(ck.meta.at("adamw_steps").get<std::size_t>(), std::move(moments));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::malformed, std::string("training state metadata: ") + e.what());
  }
  return state;
}

struct TallRun {
  ParamStore store;
  TrainResult result;
};

struct TallRunOptions {
  /// Resume from this state instead of a fresh initialization.
  const Checkpoint* resume = nullptr;
  /// Written after every evaluation when set.
  std::optional<std::filesystem::path> state_path;
  std::size_t stop_at = 0;
};

inline TallRun run_tall_training(const RunConfig& cfg, const World& world, const ParamStore& lr2hr,
                                 const ParamStore& llm, const ParamStore& hr2lr, const TallRunOptions& opts = {}) {
  const TallConfig tcfg = cfg.tall();
  Rng rng(run_seed(cfg, SeedTag::init_tall));
  TallRun run{build_tall_store(tcfg, lr2hr, llm, hr2lr, rng), {}};
  TrainState state;
  if (opts.resume) state = restore_train_state(run.store, *opts.resume);
  const auto train = make_tall_examples(world.task_train, lr2hr, tcfg.lr2hr, world.spaces);
  const auto heldout = make_tall_examples(world.task_heldout, lr2hr, tcfg.lr2hr, world.spaces);
  std::function<void(const TrainState&)> on_eval;
  if (opts.state_path) {
    on_eval = [&](const TrainState& s) {
      save_artifact(train_state_store(run.store, s), cfg, kKindTallState, s.step, *opts.state_path,
                    train_state_meta(s));
    };
  }
  run.result = train_tall(run.store, tcfg, train, heldout, seeded(cfg, cfg.train.tall, SeedTag::order_tall),
                          std::move(state), on_eval, opts.stop_at);
  return run;
}

// ---------------------------------------------------------------------------
// Baselines that train

inline ParamStore run_soft_prompt_training(const RunConfig& cfg, const World& world, const ParamStore& llm,
                                           TrainResult* result = nullptr) {
  Rng rng(run_seed(cfg, SeedTag::init_soft_prompt));
  ParamStore store = build_soft_prompt_store(llm, cfg.llm(), cfg.models.soft_prompt_len, rng);
  const auto remap = LlmRemap::lr_range(world.spaces);
  const auto examples = make_soft_prompt_examples(world.task_train, remap);
  TrainResult r = train_soft_prompt(store, cfg.llm(), examples,
                                    seeded(cfg, cfg.train.soft_prompt, SeedTag::order_soft_prompt));
  if (result) *result = std::move(r);
  return store;
}

inline ParamStore run_finetune(const RunConfig& cfg, const World& world, const ParamStore& llm) {
  return finetune_llm(llm, cfg.llm(), world.task_train, LlmRemap::lr_range(world.spaces),
                      seeded(cfg, cfg.train.finetune, SeedTag::order_finetune));
}

inline ParamStore run_scratch(const RunConfig& cfg, const World& world) {
  return train_scratch_llm(cfg.llm(), world.task_train, LlmRemap::lr_range(world.spaces),
                           seeded(cfg, cfg.train.scratch, SeedTag::order_scratch), run_seed(cfg, SeedTag::init_scratch));
}

// ---------------------------------------------------------------------------
// Evaluation

/// The stores an evaluation may need; an approach whose inputs are missing fails.
struct ModelSet {
  const ParamStore* lr2hr = nullptr;
  const ParamStore* hr2lr = nullptr;
  const ParamStore* llm = nullptr;
  const ParamStore* tall = nullptr;
  const ParamStore* soft_prompt = nullptr;
  const ParamStore* finetuned = nullptr;
  const ParamStore* scratch = nullptr;
};

/// Which checkpoints an approach reads.
inline std::vector<std::string> required_models(Approach a) {
  switch (a) {
    case Approach::direct: return {kKindLlm};
    case Approach::finetuned: return {kKindFinetuned};
    case Approach::from_scratch: return {kKindScratch};
    case Approach::naive: return {kKindLr2hr, kKindLlm, kKindHr2lr};
    case Approach::soft_prompt: return {kKindSoftPrompt};
    case Approach::tall: return {kKindLr2hr, kKindTall};
  }
  return {};
}

inline const ParamStore& need(const ParamStore* p, Approach a, const char* what) {
  if (!p) {
    throw ConfigError("approach " + std::string(approach_name(a)) + " needs a " + what + " checkpoint");
  }
  return *p;
}

inline std::vector<EvalRecord> evaluate_approach(Approach a, const RunConfig& cfg, const World& world,
                                                 const ModelSet& m, const EvalDataset& data) {
  const LlmConfig lcfg = cfg.llm();
  const TranslatorConfig tcfg = cfg.translator();
  const auto remap = LlmRemap::lr_range(world.spaces);
  switch (a) {
    case Approach::direct:
      return eval_direct(need(m.llm, a, kKindLlm), lcfg, remap, data, cfg.sampler, a);
    case Approach::finetuned:
      return eval_direct(need(m.finetuned, a, kKindFinetuned), lcfg, remap, data, cfg.sampler, a);
    case Approach::from_scratch:
      return eval_direct(need(m.scratch, a, kKindScratch), lcfg, remap, data, cfg.sampler, a);
    case Approach::naive: {
      const auto parts = naive_parts(need(m.lr2hr, a, kKindLr2hr), tcfg, need(m.llm, a, kKindLlm), lcfg,
                                     need(m.hr2lr, a, kKindHr2lr), tcfg, world.spaces);
      return eval_naive(parts, data, cfg.sampler);
    }
    case Approach::soft_prompt:
      return eval_soft_prompt(need(m.soft_prompt, a, kKindSoftPrompt), lcfg, remap, data, cfg.sampler);
    case Approach::tall:
      return eval_tall(need(m.tall, a, kKindTall), cfg.tall(), need(m.lr2hr, a, kKindLr2hr), world.spaces, data,
                       cfg.sampler);
  }
  throw ContractError("unhandled approach");
}

inline constexpr const char* kModelLabel = "toy";

inline ResultsTable evaluate_table(const RunConfig& cfg, const World& world, const ModelSet& m,
                                   std::span<const Approach> approaches, std::span<const std::string> datasets) {
  ResultsTable table;
  table.config_hash = config_hash(cfg);
  for (const auto& name : datasets) {
    const EvalDataset& data = world.dataset(name);
    table.dataset_hashes.emplace_back(name, data.hash());
    for (Approach a : approaches) {
      table.rows.push_back(make_row(name, kModelLabel, evaluate_approach(a, cfg, world, m, data)));
    }
  }
  return table;
}

inline const ResultRow* find_row(const ResultsTable& t, std::string_view dataset, Approach a) {
  for (const auto& r : t.rows) {
    if (r.dataset == dataset && r.approach == a) return &r;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Benchmark

/// Defaults with lighter translator pretraining (5,000 pairs, 3 epochs), so
/// three seeds fit in well under half an hour on one core. The translators
/// still reach about 99% held-out exact match.
inline RunConfig standard_benchmark_config() {
  RunConfig cfg;
  cfg.world.translator_pairs = 5000;
  cfg.train.translator.epochs = 3;
  return cfg;
}

struct BenchmarkSeedResult {
  std::uint64_t seed = 0;
  ResultsTable table;
  double lr2hr_exact_match = 0.0;
  double hr2lr_exact_match = 0.0;
  double llm_perplexity = 0.0;
  std::size_t tall_steps = 0;
  /// Frozen tensors of the trained TALL store that differ from the loaded backbones.
  std::vector<std::string> frozen_changed;
  /// FNV-1a of every serialized checkpoint, by kind.
  std::map<std::string, std::string> checkpoint_digests;
};

inline std::string digest(std::span<const std::uint8_t> bytes) {
  Fnv1a h;
  h.bytes(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  return h.hex();
}

/// Names of frozen entries in `trained` whose bytes differ from `source`.
inline std::vector<std::string> frozen_differences(const ParamStore& trained, const ParamStore& source,
                                                   std::string_view prefix) {
  std::vector<std::string> out;
  for (const auto& name : source.names(prefix)) {
    if (!trained.contains(name) || !trained.is_frozen(name) || !trained.at(name).bit_equal(source.at(name))) {
      out.push_back(name);
    }
  }
  return out;
}

/// Trains every model for one seed (world.seed = seed), round-trips each
/// through the checkpoint format and evaluates all six approaches on both
/// datasets.
inline BenchmarkSeedResult run_benchmark_seed(RunConfig cfg, std::uint64_t seed, std::ostream* log = nullptr) {
  cfg.world.seed = seed;
  BenchmarkSeedResult out;
  out.seed = seed;
  const World world = build_world(cfg);
  auto note = [&](const std::string& msg) {
    if (log) *log << "[seed " << seed << "] " << msg << std::endl;
  };
  auto roundtrip = [&](const ParamStore& store, const std::string& kind, std::size_t step) {
    nlohmann::json meta = artifact_meta(cfg, kind, step);
    meta["signature"] = model_signature(cfg, kind);
    const auto bytes = serialize_checkpoint(store, meta);
    out.checkpoint_digests[kind] = digest(bytes);
    return deserialize_checkpoint(bytes).store;
  };

  PretrainReport rep;
  const ParamStore lr2hr = roundtrip(pretrain_translator(cfg, world, Direction::lr2hr, &rep), kKindLr2hr,
                                     rep.train.steps);
  out.lr2hr_exact_match = rep.heldout_accuracy;
  note("lr2hr exact match " + std::to_string(rep.heldout_accuracy));
  const ParamStore hr2lr = roundtrip(pretrain_translator(cfg, world, Direction::hr2lr, &rep), kKindHr2lr,
                                     rep.train.steps);
  out.hr2lr_exact_match = rep.heldout_accuracy;
  note("hr2lr exact match " + std::to_string(rep.heldout_accuracy));
  const ParamStore llm = roundtrip(pretrain_llm(cfg, world, &rep), kKindLlm, rep.train.steps);
  out.llm_perplexity = rep.heldout_perplexity;
  note("llm perplexity " + std::to_string(rep.heldout_perplexity));

  TallRun tall = run_tall_training(cfg, world, lr2hr, llm, hr2lr);
  out.tall_steps = tall.result.steps;
  for (const auto& [src, prefix] : {std::pair{&lr2hr, "encoder"}, std::pair{&llm, "llm"},
                                    std::pair{&hr2lr, "decoder"}, std::pair{&hr2lr, "lm_head"}}) {
    for (auto& n : frozen_differences(tall.store, *src, prefix)) out.frozen_changed.push_back(std::move(n));
  }
  const ParamStore tall_store = roundtrip(tall.store, kKindTall, tall.result.steps);
  note("tall trained, best eval loss " + std::to_string(tall.result.best_eval_loss));

  const ParamStore soft = roundtrip(run_soft_prompt_training(cfg, world, llm), kKindSoftPrompt, 0);
  const ParamStore finetuned = roundtrip(run_finetune(cfg, world, llm), kKindFinetuned, 0);
  const ParamStore scratch = roundtrip(run_scratch(cfg, world), kKindScratch, 0);
  note("baselines trained");

  const ModelSet models{&lr2hr, &hr2lr, &llm, &tall_store, &soft, &finetuned, &scratch};
  const std::vector<std::string> datasets = {"in_domain", "shifted"};
  out.table = evaluate_table(cfg, world, models, kAllApproaches, datasets);
  return out;
}

}  // namespace tall
