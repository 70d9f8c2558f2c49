// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "tall/error.hpp"
#include "tall/random.hpp"

namespace tall {

struct SamplerConfig {
  /// 0 selects the argmax.
  double temperature = 0.7;
  std::size_t top_k = 50;
  double top_p = 0.95;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature >= 0.0)) throw ConfigError("sampler temperature must be >= 0");
    if (top_k < 1) throw ConfigError("sampler top_k must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("sampler top_p must lie in (0, 1]");
  }
  bool operator==(const SamplerConfig&) const = default;
};

/// Indices and probabilities the sampler can emit, in descending probability.
struct SamplerSupport {
  std::vector<std::size_t> ids;
  std::vector<double> probs;
};

/// Temperature, then top-k (clamped to V), then the shortest descending
/// prefix whose mass reaches top_p (at least one token), renormalized.
/// Ties are broken toward the lower index.
inline SamplerSupport sampler_support(std::span<const double> logits, const SamplerConfig& cfg) {
  cfg.validate();
  if (logits.empty()) throw ContractError("sampler: empty logits");
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  if (cfg.temperature == 0.0) return {{order[0]}, {1.0}};

  const std::size_t k = std::min(cfg.top_k, logits.size());
  order.resize(k);
  const double mx = logits[order[0]] / cfg.temperature;
  std::vector<double> p(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    p[i] = std::exp(logits[order[i]] / cfg.temperature - mx);
    total += p[i];
  }
  for (double& v : p) v /= total;

  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < k) {
    mass += p[keep++];
    if (mass >= cfg.top_p) break;
  }
  order.resize(keep);
  p.resize(keep);
  for (double& v : p) v /= mass;
  return {std::move(order), std::move(p)};
}

inline std::size_t sample_token(std::span<const double> logits, const SamplerConfig& cfg, Rng& rng) {
  SamplerSupport s = sampler_support(logits, cfg);
  if (s.ids.size() == 1) return s.ids[0];
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    acc += s.probs[i];
    if (u < acc) return s.ids[i];
  }
  return s.ids.back();
}

/// Per-example generator, so evaluation order does not change draws.
inline Rng example_rng(const SamplerConfig& cfg, std::size_t example_index) {
  return Rng(derive_seed(cfg.seed, example_index));
}

}  // namespace tall
