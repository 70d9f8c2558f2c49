// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "tall/param_store.hpp"

namespace tall {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. State exists only for trainable entries.
class AdamW {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void step(ParamStore& store, double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto& [name, entry] : store) {
      if (entry.frozen) continue;
      Tensor& p = entry.tensor;
      Moments& s = state_[name];
      if (s.m.empty()) {
        s.m.assign(p.numel(), 0.0);
        s.v.assign(p.numel(), 0.0);
      }
      auto w = p.data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
      }
    }
  }

  std::size_t steps() const noexcept { return steps_; }
  const std::map<std::string, Moments>& state() const noexcept { return state_; }

  /// Restores a saved state (used when resuming).
  void restore(std::size_t steps, std::map<std::string, Moments> state) {
    steps_ = steps;
    state_ = std::move(state);
  }

  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::size_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

/// Linear warmup from 0 over `warmup` steps, then cosine annealing to 0 at `total`:
/// peak * 0.5 * (1 + cos(pi * (step - warmup) / (total - warmup))).
inline double cosine_lr(std::size_t step, std::size_t total, double peak, std::size_t warmup = 0) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParamStore& store, double max_norm) {
  const double norm = store.grad_norm();
  if (max_norm > 0.0 && norm > max_norm) store.scale_grads(max_norm / norm);
  return norm;
}

}  // namespace tall
