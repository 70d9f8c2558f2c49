// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// tall: pretrain backbones, train the pipeline and baselines, evaluate,
// report parameter counts and run the multi-seed benchmark.
//
// Exit codes: 0 ok, 2 configuration error, 3 checkpoint error, 4 numerical failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tall/experiment.hpp"
#include "tall/param_report.hpp"

namespace fs = std::filesystem;
using namespace tall;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitCheckpoint = 3;
constexpr int kExitNumerical = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Override world.seed");
  cmd->add_option("--out-dir", c.out_dir, "Override paths.out_dir");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.world.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.paths.out_dir = c.out_dir;
  cfg.validate();
  return cfg;
}

fs::path default_path(const RunConfig& cfg, const std::string& given, const std::string& kind) {
  return given.empty() ? fs::path(cfg.paths.out_dir) / (kind + ".tlcp") : fs::path(given);
}

void write_metrics(const fs::path& path, const std::vector<MetricRecord>& history, const std::string& hash) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write metrics log " + path.string());
  write_metrics_jsonl(out, history, hash);
}

fs::path metrics_path(const fs::path& checkpoint, const std::string& given) {
  if (!given.empty()) return given;
  fs::path p = checkpoint;
  p += ".metrics.jsonl";
  return p;
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  Common common;
  std::string what;
  std::string out;
  std::string metrics;
};

int cmd_pretrain(const PretrainArgs& a) {
  const RunConfig cfg = resolve(a.common);
  const World world = build_world(cfg);
  const fs::path out = default_path(cfg, a.out, a.what);
  PretrainReport rep;
  ParamStore store;
  if (a.what == kKindLr2hr) {
    store = pretrain_translator(cfg, world, Direction::lr2hr, &rep);
  } else if (a.what == kKindHr2lr) {
    store = pretrain_translator(cfg, world, Direction::hr2lr, &rep);
  } else {
    store = pretrain_llm(cfg, world, &rep);
  }
  save_artifact(store, cfg, a.what, rep.train.steps, out,
                {{"heldout_accuracy", rep.heldout_accuracy}, {"heldout_perplexity", rep.heldout_perplexity}});
  write_metrics(metrics_path(out, a.metrics), rep.train.history, config_hash(cfg));
  std::cout << a.what << ": " << rep.train.steps << " steps, held-out "
            << (a.what == kKindLlm ? "next-token accuracy " : "exact match ") << rep.heldout_accuracy
            << ", perplexity " << rep.heldout_perplexity << "\nwrote " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct Backbones {
  ParamStore lr2hr, llm, hr2lr;
};

/// Missing files are reported with the stage that needs them.
Backbones load_backbones(const RunConfig& cfg, const std::string& lr2hr, const std::string& llm,
                         const std::string& hr2lr) {
  auto load = [&](const std::string& given, const char* kind, const char* stage) {
    const fs::path p = default_path(cfg, given, kind);
    if (!fs::exists(p)) {
      throw CheckpointError(CheckpointError::Kind::io,
                            std::string(stage) + " needs a " + kind + " checkpoint; none at " + p.string());
    }
    return load_artifact(p, cfg, kind).store;
  };
  Backbones b;
  b.lr2hr = load(lr2hr, kKindLr2hr, "stage 1 (frozen encoder)");
  b.llm = load(llm, kKindLlm, "stage 4 (frozen LLM)");
  b.hr2lr = load(hr2lr, kKindHr2lr, "stage 7 (frozen decoder)");
  return b;
}

struct TrainTallArgs {
  Common common;
  std::string lr2hr, llm, hr2lr, out, metrics, state, resume;
  bool dry_run = false;
  std::size_t stop_at = 0;
};

int dry_run(const RunConfig& cfg, const TrainTallArgs& a) {
  const TallConfig tcfg = cfg.tall();
  tcfg.validate();
  Backbones b;
  const bool have = fs::exists(default_path(cfg, a.lr2hr, kKindLr2hr)) &&
                    fs::exists(default_path(cfg, a.llm, kKindLlm)) && fs::exists(default_path(cfg, a.hr2lr, kKindHr2lr));
  if (have) {
    b = load_backbones(cfg, a.lr2hr, a.llm, a.hr2lr);
  } else {
    Rng rng(run_seed(cfg, SeedTag::init_lr2hr));
    init_translator(b.lr2hr, tcfg.lr2hr, rng);
    init_llm(b.llm, tcfg.llm, rng);
    init_translator(b.hr2lr, tcfg.hr2lr, rng);
  }
  Rng rng(run_seed(cfg, SeedTag::init_tall));
  const ParamStore store = build_tall_store(tcfg, b.lr2hr, b.llm, b.hr2lr, rng);
  const World world = build_world(cfg);
  const TallExample ex = make_tall_example(world.task_train.front(), b.lr2hr, tcfg.lr2hr, world.spaces);
  Tape tape(Tape::Mode::inference);
  const TallTrace t = tall_forward_trace(tape, store, tcfg, ex.lr_prefix, ex.hr_tokens, ex.teacher);
  const std::pair<const char*, Var> stages[] = {{"1 encoder", t.encoder}, {"2 adapter1", t.adapter1},
                                                {"3 bridge1", t.bridge1}, {"4 llm", t.llm},
                                                {"5 adapter2", t.adapter2}, {"6 bridge2", t.bridge2},
                                                {"7 decoder+head", t.logits}};
  std::cout << "dry run (" << (have ? "loaded backbones" : "untrained backbones") << ")\n";
  for (const auto& [name, v] : stages) std::cout << "  stage " << name << " " << shape_str(v.shape()) << "\n";
  const ParamCounts c = store.counts();
  std::cout << "  parameters " << with_commas(c.total) << ", trainable " << with_commas(c.trainable) << "\n";
  return kExitOk;
}

int cmd_train_tall(const TrainTallArgs& a) {
  const RunConfig cfg = resolve(a.common);
  if (a.dry_run) return dry_run(cfg, a);
  const Backbones b = load_backbones(cfg, a.lr2hr, a.llm, a.hr2lr);
  const World world = build_world(cfg);
  const fs::path out = default_path(cfg, a.out, kKindTall);
  fs::path state_path = a.state.empty() ? fs::path(out.string() + ".state") : fs::path(a.state);

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_artifact(a.resume, cfg, kKindTallState);
  TallRunOptions opts;
  opts.resume = resume ? &*resume : nullptr;
  opts.state_path = state_path;
  opts.stop_at = a.stop_at;
  const TallRun run = run_tall_training(cfg, world, b.lr2hr, b.llm, b.hr2lr, opts);

  // A fresh run starts its log; a resumed run appends to it.
  const fs::path mpath = metrics_path(out, a.metrics);
  if (mpath.has_parent_path()) fs::create_directories(mpath.parent_path());
  std::ofstream log(mpath, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw ConfigError("cannot write metrics log " + mpath.string());
  write_metrics_jsonl(log, run.result.history, config_hash(cfg));

  const std::size_t total = total_steps(cfg.train.tall, world.task_train.size());
  if (run.result.steps < total) {
    std::cout << "stopped at step " << run.result.steps << " of " << total << "; state in " << state_path.string()
              << "\n";
    return kExitOk;
  }
  save_artifact(run.store, cfg, kKindTall, run.result.steps, out,
                {{"best_step", run.result.best_step}, {"best_eval_loss", run.result.best_eval_loss}});
  std::cout << "tall: " << run.result.steps << " steps, best eval loss " << run.result.best_eval_loss << " at step "
            << run.result.best_step << "\nwrote " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BaselineArgs {
  Common common;
  std::string what;
  std::string llm, out;
};

int cmd_train_baseline(const BaselineArgs& a) {
  const RunConfig cfg = resolve(a.common);
  const World world = build_world(cfg);
  auto base = [&] { return load_artifact(default_path(cfg, a.llm, kKindLlm), cfg, kKindLlm).store; };
  ParamStore store;
  std::string kind;
  if (a.what == "soft-prompt") {
    kind = kKindSoftPrompt;
    store = run_soft_prompt_training(cfg, world, base());
  } else if (a.what == "finetune") {
    kind = kKindFinetuned;
    store = run_finetune(cfg, world, base());
  } else {
    kind = kKindScratch;
    store = run_scratch(cfg, world);
  }
  const fs::path out = default_path(cfg, a.out, kind);
  save_artifact(store, cfg, kind, 0, out);
  std::cout << kind << ": wrote " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string approach;
  bool all = false;
  std::string dataset = "shifted";
  std::optional<std::uint64_t> sampler_seed;
  std::string lr2hr, hr2lr, llm, tall, soft_prompt, finetuned, scratch;
  std::string json;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig cfg = resolve(a.common);
  if (a.sampler_seed) cfg.sampler.seed = *a.sampler_seed;
  if (a.all == !a.approach.empty()) throw ConfigError("eval needs exactly one of --approach or --all");
  std::vector<Approach> approaches;
  if (a.all) {
    approaches.assign(kAllApproaches.begin(), kAllApproaches.end());
  } else {
    approaches.push_back(parse_approach(a.approach));
  }
  std::vector<std::string> datasets;
  if (a.dataset == "all") {
    datasets = {"in_domain", "shifted"};
  } else {
    datasets = {a.dataset};
  }
  const World world = build_world(cfg);
  for (const auto& d : datasets) world.dataset(d);

  std::map<std::string, ParamStore> loaded;
  const std::map<std::string, std::string> given = {
      {kKindLr2hr, a.lr2hr},         {kKindHr2lr, a.hr2lr},         {kKindLlm, a.llm},
      {kKindTall, a.tall},           {kKindSoftPrompt, a.soft_prompt}, {kKindFinetuned, a.finetuned},
      {kKindScratch, a.scratch}};
  for (Approach ap : approaches) {
    for (const auto& kind : required_models(ap)) {
      if (loaded.count(kind)) continue;
      const fs::path p = default_path(cfg, given.at(kind), kind);
      if (!fs::exists(p)) {
        throw CheckpointError(CheckpointError::Kind::io, "approach " + std::string(approach_name(ap)) + " needs a " +
                                                             kind + " checkpoint; none at " + p.string());
      }
      loaded.emplace(kind, load_artifact(p, cfg, kind).store);
    }
  }
  auto get = [&](const char* kind) -> const ParamStore* {
    const auto it = loaded.find(kind);
    return it == loaded.end() ? nullptr : &it->second;
  };
  const ModelSet models{get(kKindLr2hr), get(kKindHr2lr),   get(kKindLlm),    get(kKindTall),
                        get(kKindSoftPrompt), get(kKindFinetuned), get(kKindScratch)};
  const ResultsTable table = evaluate_table(cfg, world, models, approaches, datasets);
  std::cout << format_results(table);
  if (!a.json.empty()) {
    std::ofstream out(a.json, std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + a.json);
    out << to_json(table).dump(2) << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  Common common;
  std::string preset;
  bool check = false;
  bool json = false;
};

int cmd_param_report(const ReportArgs& a) {
  const RunConfig cfg = resolve(a.common);
  const ParamReport r = param_report(a.preset, cfg.tall());
  std::cout << (a.json ? to_json(r).dump(2) + "\n" : format_param_report(r));
  if (!a.check) return kExitOk;
  std::vector<std::string> diffs;
  if (a.preset == "toy") {
    // Enumerate a live store and compare per module.
    const TallConfig t = cfg.tall();
    ParamStore lr2hr, llm, hr2lr;
    Rng rng(1);
    init_translator(lr2hr, t.lr2hr, rng);
    init_llm(llm, t.llm, rng);
    init_translator(hr2lr, t.hr2lr, rng);
    const ParamStore store = build_tall_store(t, lr2hr, llm, hr2lr, rng);
    const std::size_t embed = store.at("decoder.embed").numel();
    const std::size_t live[] = {store.counts("encoder").total,
                                store.at("llm.embed").numel(),
                                store.counts("adapter1").total,
                                store.counts("bridge1").total,
                                store.counts("llm").total - store.at("llm.embed").numel(),
                                store.counts("adapter2").total,
                                store.counts("bridge2").total,
                                store.counts("decoder").total,
                                embed + store.counts("lm_head").total};
    for (std::size_t i = 0; i < r.modules.size(); ++i) {
      if (r.modules[i].total != live[i]) {
        diffs.push_back(r.modules[i].name + ": closed form " + std::to_string(r.modules[i].total) + ", live " +
                        std::to_string(live[i]));
      }
    }
    if (r.total() != store.counts().total) diffs.push_back("total differs from the live store");
    if (r.trainable() != store.counts().trainable) diffs.push_back("trainable differs from the live store");
  } else {
    diffs = check_param_report(r);
  }
  for (const auto& d : diffs) std::cerr << "mismatch: " << d << "\n";
  std::cout << (diffs.empty() ? "check: ok\n" : "check: FAILED\n");
  return diffs.empty() ? kExitOk : 1;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  Common common;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string json;
};

int cmd_benchmark(const BenchArgs& a) {
  RunConfig cfg = a.common.config.empty() ? standard_benchmark_config() : load_run_config(a.common.config);
  if (!a.common.out_dir.empty()) cfg.paths.out_dir = a.common.out_dir;
  cfg.validate();
  const double chance = 1.0 / static_cast<double>(cfg.world.grammar.vocab_words);
  nlohmann::json all = nlohmann::json::array();
  bool ok = true;
  for (std::uint64_t seed : a.seeds) {
    const BenchmarkSeedResult r = run_benchmark_seed(cfg, seed, &std::cerr);
    std::cout << "seed " << seed << "\n" << format_results(r.table);
    const auto* tall = find_row(r.table, "shifted", Approach::tall);
    bool seed_ok = true;
    for (Approach other : {Approach::direct, Approach::naive, Approach::soft_prompt}) {
      const auto* row = find_row(r.table, "shifted", other);
      seed_ok = seed_ok && tall->correct > row->correct;
    }
    const auto* direct = find_row(r.table, "shifted", Approach::direct);
    const bool near_chance = static_cast<double>(direct->correct) <= 2.0 * chance * static_cast<double>(direct->total);
    std::cout << "tall above direct, naive and soft_prompt on shifted: " << (seed_ok ? "yes" : "no") << "\n";
    std::cout << "direct within twice chance on shifted: " << (near_chance ? "yes" : "no") << "\n\n";
    seed_ok = seed_ok && near_chance;
    ok = ok && seed_ok;
    nlohmann::json j = to_json(r.table);
    j["seed"] = seed;
    all.push_back(j);
  }
  if (!a.json.empty()) {
    std::ofstream out(a.json, std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + a.json);
    out << all.dump(2) << "\n";
  }
  return ok ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy-world TALL pipeline: pretraining, training, evaluation and parameter reports"};
  app.require_subcommand(1);

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Train a frozen backbone");
  add_common(p, pre.common);
  p->add_option("model", pre.what, "Which backbone")
      ->required()
      ->check(CLI::IsMember({kKindLr2hr, kKindHr2lr, kKindLlm}));
  p->add_option("--out", pre.out, "Checkpoint path");
  p->add_option("--metrics", pre.metrics, "Metrics log path (JSON lines)");

  TrainTallArgs tt;
  auto* t = app.add_subcommand("train-tall", "Train adapters and bridges between frozen backbones");
  add_common(t, tt.common);
  t->add_option("--lr2hr", tt.lr2hr, "LR->HR translator checkpoint");
  t->add_option("--llm", tt.llm, "LLM checkpoint");
  t->add_option("--hr2lr", tt.hr2lr, "HR->LR translator checkpoint");
  t->add_option("--out", tt.out, "Best checkpoint path");
  t->add_option("--metrics", tt.metrics, "Metrics log path (JSON lines)");
  t->add_option("--state", tt.state, "Resume-state path (default <out>.state)");
  t->add_option("--resume", tt.resume, "Continue from a resume-state checkpoint");
  t->add_option("--stop-at", tt.stop_at, "Stop after this many steps, keeping the schedule");
  t->add_flag("--dry-run", tt.dry_run, "Check shapes through all seven stages and exit");

  BaselineArgs bl;
  auto* b = app.add_subcommand("train-baseline", "Train a soft prompt, a fine-tuned LLM or an LR-only LLM");
  add_common(b, bl.common);
  b->add_option("which", bl.what, "Baseline")->required()->check(CLI::IsMember({"soft-prompt", "finetune", "scratch"}));
  b->add_option("--llm", bl.llm, "Base LLM checkpoint");
  b->add_option("--out", bl.out, "Checkpoint path");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Final-word accuracy");
  add_common(e, ev.common);
  e->add_option("--approach", ev.approach, "direct, naive, soft-prompt, finetune, scratch or tall");
  e->add_flag("--all", ev.all, "Every approach");
  e->add_option("--dataset", ev.dataset, "in_domain, shifted or all")
      ->check(CLI::IsMember({"in_domain", "shifted", "all"}));
  e->add_option("--sampler-seed", ev.sampler_seed, "Override sampler.seed");
  e->add_option("--lr2hr", ev.lr2hr, "LR->HR translator checkpoint");
  e->add_option("--hr2lr", ev.hr2lr, "HR->LR translator checkpoint");
  e->add_option("--llm", ev.llm, "LLM checkpoint");
  e->add_option("--tall", ev.tall, "Trained TALL checkpoint");
  e->add_option("--soft-prompt", ev.soft_prompt, "Soft-prompt checkpoint");
  e->add_option("--finetuned", ev.finetuned, "Fine-tuned LLM checkpoint");
  e->add_option("--scratch", ev.scratch, "LR-only LLM checkpoint");
  e->add_option("--json", ev.json, "Also write the table as JSON");

  ReportArgs rp;
  auto* r = app.add_subcommand("param-report", "Parameter counts per module");
  add_common(r, rp.common);
  r->add_option("--preset", rp.preset, "bloomz, qwen or toy")->required();
  r->add_flag("--check", rp.check, "Exit nonzero unless the counts match the expected figures");
  r->add_flag("--json", rp.json, "Emit JSON");

  BenchArgs bn;
  auto* bm = app.add_subcommand("benchmark",
                                "Train and evaluate everything for several seeds (standard profile unless --config)");
  add_common(bm, bn.common);
  bm->add_option("--seeds", bn.seeds, "World seeds")->delimiter(',');
  bm->add_option("--json", bn.json, "Also write the tables as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitConfig;
  }

  try {
    if (*p) return cmd_pretrain(pre);
    if (*t) return cmd_train_tall(tt);
    if (*b) return cmd_train_baseline(bl);
    if (*e) return cmd_eval(ev);
    if (*r) return cmd_param_report(rp);
    if (*bm) return cmd_benchmark(bn);
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& ex) {
    std::cerr << "checkpoint error: " << ex.what() << "\n";
    return kExitCheckpoint;
  } catch (const NumericalError& ex) {
    std::cerr << "numerical failure: " << ex.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return kExitOk;
}
