// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Parameter accounting for a pipeline: per-module totals and trainable
// counts, overall totals, and the share held by the language model.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tall/error.hpp"
#include "tall/nn.hpp"
#include "tall/pipeline.hpp"

namespace tall {

struct ModuleRow {
  std::string name;
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::string notes;
  /// Parameters this row shares with an earlier row (tied weights); they are
  /// counted once in the overall total.
  std::size_t shared = 0;
  /// Part of the language model ("LLM only" share).
  bool llm = false;
};

struct ParamReport {
  std::string preset;
  std::vector<ModuleRow> modules;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& m : modules) n += m.total - m.shared;
    return n;
  }
  std::size_t trainable() const {
    std::size_t n = 0;
    for (const auto& m : modules) n += m.trainable;
    return n;
  }
  std::size_t llm_only() const {
    std::size_t n = 0;
    for (const auto& m : modules) {
      if (m.llm) n += m.total;
    }
    return n;
  }
};

/// 100 * num / den rounded half-up to `decimals` places, formatted with a
/// trailing '%'. Integer arithmetic throughout.
inline std::string format_percent(std::uint64_t num, std::uint64_t den, int decimals) {
  if (den == 0) throw ContractError("percentage of an empty total");
  std::uint64_t scale = 1;
  for (int i = 0; i < decimals; ++i) scale *= 10;
  if (num > (std::uint64_t{1} << 40) || den > (std::uint64_t{1} << 40) || decimals > 4) {
    throw ContractError("percentage operands out of range");
  }
  const std::uint64_t units = (num * 100 * scale * 2 + den) / (den * 2);
  std::ostringstream os;
  os << units / scale;
  if (decimals > 0) os << '.' << std::setw(decimals) << std::setfill('0') << units % scale;
  os << '%';
  return os.str();
}

/// 1234567 -> "1,234,567"
inline std::string with_commas(std::size_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i != 0 && (digits.size() - i) % 3 == 0) out.push_back(',');
    out.push_back(digits[i]);
  }
  return out;
}

namespace detail {

inline std::string mlp_note(const AdapterSpec& s) {
  return "Two-layer MLP (" + std::to_string(s.d_in) + " -> " + std::to_string(s.d_hidden) + ", " +
         std::to_string(s.d_hidden) + " -> " + std::to_string(s.d_out) + ")";
}

inline ModuleRow frozen_row(std::string name, std::size_t n, std::string notes, bool llm = false,
                            std::size_t shared = 0) {
  return {std::move(name), n, 0, std::move(notes), shared, llm};
}

inline ModuleRow trainable_row(std::string name, std::size_t n, std::string notes) {
  return {std::move(name), n, n, std::move(notes), 0, false};
}

/// Rows for the 0.5B-scale pipelines. Adapters are computed from their
/// shapes; the other modules are declared counts of the pretrained parts.
struct DeclaredPipeline {
  std::size_t encoder, llm_embeddings, bridge1, main_llm, bridge2, decoder, lm_head;
  AdapterSpec adapter1, adapter2;
  const char* llm_class;
};

inline ParamReport declared_report(const char* preset, const DeclaredPipeline& p) {
  ParamReport r;
  r.preset = preset;
  r.modules = {
      frozen_row("HE-EN Encoder", p.encoder, "Frozen encoder"),
      frozen_row("LLM Embeddings", p.llm_embeddings, "Frozen embedding layer", true),
      trainable_row("Autoencoder 1", adapter_param_count(p.adapter1), mlp_note(p.adapter1)),
      trainable_row("Custom Decoder 1", p.bridge1, "Trainable decoder module"),
      frozen_row("Main LLM", p.main_llm, std::string("Frozen main LLM (") + p.llm_class + ")", true),
      trainable_row("Autoencoder 2", adapter_param_count(p.adapter2), mlp_note(p.adapter2)),
      trainable_row("Custom Encoder 2", p.bridge2, "Trainable encoder module"),
      frozen_row("EN-HE Decoder", p.decoder, "Frozen decoder module"),
      frozen_row("LM Head", p.lm_head, "Final linear mapping (tied to the decoder embedding)", false, p.lm_head),
  };
  return r;
}

}  // namespace detail

inline ParamReport bloomz_report() {
  return detail::declared_report(
      "bloomz", {138'341'376, 256'901'120, 101'828'608, 302'313'472, 19'176'448, 59'195'904, 33'709'568,
                 AdapterSpec{1024, 2048, 1024}, AdapterSpec{1024, 1024, 512}, "BloomModel"});
}

inline ParamReport qwen_report() {
  return detail::declared_report(
      "qwen", {138'341'376, 136'134'656, 83'598'080, 357'898'112, 19'176'448, 59'195'904, 33'709'568,
               AdapterSpec{1024, 1792, 896}, AdapterSpec{896, 1024, 512}, "Qwen2Model"});
}

/// Toy pipeline counts from closed forms (no tensors allocated).
inline ParamReport toy_report(const TallConfig& cfg) {
  cfg.validate();
  const TranslatorConfig& enc = cfg.lr2hr;
  const TranslatorConfig& dec = cfg.hr2lr;
  const std::size_t dec_embed = dec.tgt_vocab * dec.d_model;
  ParamReport r;
  r.preset = "toy";
  r.modules = {
      detail::frozen_row("LR-HR Encoder", enc.src_vocab * enc.d_model + transformer_stack_param_count(enc.encoder()),
                         "Frozen encoder"),
      detail::frozen_row("LLM Embeddings", cfg.llm.vocab * cfg.llm.d_model, "Frozen embedding layer", true),
      detail::trainable_row("Adapter 1", adapter_param_count(cfg.adapter1), detail::mlp_note(cfg.adapter1)),
      detail::trainable_row("Bridge 1", transformer_stack_param_count(cfg.bridge1), "Trainable decoder module"),
      detail::frozen_row("Main LLM", transformer_stack_param_count(cfg.llm.blocks()), "Frozen main LLM", true),
      detail::trainable_row("Adapter 2", adapter_param_count(cfg.adapter2), detail::mlp_note(cfg.adapter2)),
      detail::trainable_row("Bridge 2", transformer_stack_param_count(cfg.bridge2), "Trainable encoder module"),
      detail::frozen_row("HR-LR Decoder", dec_embed + transformer_stack_param_count(dec.decoder()),
                         "Frozen decoder module"),
      detail::frozen_row("LM Head", dec_embed + dec.tgt_vocab, "Final linear mapping (tied to the decoder embedding)",
                         false, dec_embed),
  };
  return r;
}

inline ParamReport param_report(std::string_view preset, const TallConfig& toy = TallConfig{}) {
  if (preset == "bloomz") return bloomz_report();
  if (preset == "qwen") return qwen_report();
  if (preset == "toy") return toy_report(toy);
  throw ConfigError("unknown preset '" + std::string(preset) + "' (expected bloomz, qwen or toy)");
}

inline std::string llm_share(const ParamReport& r) { return format_percent(r.llm_only(), r.total(), 2); }
inline std::string trainable_share(const ParamReport& r) { return format_percent(r.trainable(), r.total(), 2); }

/// Published figures for the two 0.5B-scale presets.
struct ExpectedReport {
  std::vector<std::size_t> module_totals;
  std::vector<std::size_t> module_trainable;
  std::size_t total, llm_only, trainable;
  std::string llm_share, trainable_share;
};

inline const ExpectedReport* expected_report(std::string_view preset) {
  static const ExpectedReport bloomz{
      {138'341'376, 256'901'120, 4'203'520, 101'828'608, 302'313'472, 1'577'472, 19'176'448, 59'195'904, 33'709'568},
      {0, 0, 4'203'520, 101'828'608, 0, 1'577'472, 19'176'448, 0, 0},
      883'537'920,
      559'214'592,
      126'786'048,
      "63.29%",
      "14.35%"};
  static const ExpectedReport qwen{
      {138'341'376, 136'134'656, 3'448'704, 83'598'080, 357'898'112, 1'446'400, 19'176'448, 59'195'904, 33'709'568},
      {0, 0, 3'448'704, 83'598'080, 0, 1'446'400, 19'176'448, 0, 0},
      799'239'680,
      494'032'768,
      107'669'632,
      "61.81%",
      "13.47%"};
  if (preset == "bloomz") return &bloomz;
  if (preset == "qwen") return &qwen;
  return nullptr;
}

/// Differences between a report and the published figures; empty when they agree.
inline std::vector<std::string> check_param_report(const ParamReport& r) {
  const ExpectedReport* e = expected_report(r.preset);
  if (!e) throw ConfigError("no published figures for preset '" + r.preset + "'");
  std::vector<std::string> diffs;
  auto cmp = [&](const std::string& what, const auto& got, const auto& want) {
    if (got != want) {
      std::ostringstream os;
      os << what << ": got " << got << ", expected " << want;
      diffs.push_back(os.str());
    }
  };
  if (r.modules.size() != e->module_totals.size()) {
    diffs.push_back("module count " + std::to_string(r.modules.size()) + ", expected " +
                    std::to_string(e->module_totals.size()));
    return diffs;
  }
  for (std::size_t i = 0; i < r.modules.size(); ++i) {
    cmp(r.modules[i].name + " total", r.modules[i].total, e->module_totals[i]);
    cmp(r.modules[i].name + " trainable", r.modules[i].trainable, e->module_trainable[i]);
  }
  cmp("total", r.total(), e->total);
  cmp("LLM only", r.llm_only(), e->llm_only);
  cmp("trainable", r.trainable(), e->trainable);
  cmp("LLM share", llm_share(r), e->llm_share);
  cmp("trainable share", trainable_share(r), e->trainable_share);
  return diffs;
}

inline std::string format_param_report(const ParamReport& r) {
  std::ostringstream os;
  os << "Overall statistics (" << r.preset << ")\n";
  os << "  " << std::left << std::setw(24) << "Total Parameters" << with_commas(r.total()) << "\n";
  os << "  " << std::setw(24) << "LLM Only Parameters" << with_commas(r.llm_only()) << " (" << llm_share(r)
     << ")\n";
  os << "  " << std::setw(24) << "Trainable Parameters" << with_commas(r.trainable()) << " (" << trainable_share(r)
     << ")\n\n";
  os << "Module breakdown (" << r.preset << ")\n";
  os << "  " << std::setw(20) << "Module" << std::right << std::setw(14) << "Total" << std::setw(14) << "Trainable"
     << "  Notes\n";
  for (const auto& m : r.modules) {
    os << "  " << std::left << std::setw(20) << m.name << std::right << std::setw(14) << with_commas(m.total)
       << std::setw(14) << with_commas(m.trainable) << "  " << m.notes << "\n";
  }
  return os.str();
}

inline nlohmann::json to_json(const ParamReport& r) {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : r.modules) {
    mods.push_back({{"name", m.name}, {"total", m.total}, {"trainable", m.trainable}, {"shared", m.shared},
                    {"notes", m.notes}});
  }
  return {{"preset", r.preset},
          {"total", r.total()},
          {"llm_only", r.llm_only()},
          {"llm_share", llm_share(r)},
          {"trainable", r.trainable()},
          {"trainable_share", trainable_share(r)},
          {"modules", mods}};
}

}  // namespace tall
