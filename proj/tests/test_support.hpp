// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the test executables.

#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "tall/grad_check.hpp"
#include "tall/ops.hpp"
#include "tall/param_store.hpp"
#include "tall/random.hpp"

namespace tall::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

/// Overwrites every trainable value with N(0, scale^2) so gradients are not tiny.
inline void randomize(ParamStore& store, Rng& rng, double scale) {
  for (auto& [name, e] : store) {
    if (e.frozen) continue;
    for (double& v : e.tensor.data()) v = rng.normal(0.0, scale);
  }
}

/// Scalar summary of a non-scalar output: sum(out * W) for a fixed random W.
inline Var project(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(out * tape.constant(random_tensor(out.shape(), rng)));
}

struct GradCheckResult {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
};

/// Backward through `loss` against central differences, for every trainable
/// tensor of `store`. Parameters without a gradient count as zero.
inline GradCheckResult store_grad_check(ParamStore& store, const std::function<Var(Tape&)>& loss, double eps = 1e-5) {
  Tape tape;
  Var l = loss(tape);
  tape.backward(l);
  GradCheckResult r;
  for (const auto& name : store.names()) {
    if (store.is_frozen(name)) continue;
    Tensor& t = store.at(name);
    auto g = tape.param_grad(t);
    std::vector<double> analytic(g.begin(), g.end());
    if (analytic.empty()) analytic.assign(t.numel(), 0.0);
    auto f = [&] {
      Tape t2(Tape::Mode::inference);
      return loss(t2).item();
    };
    const auto numeric = finite_diff_grad_inplace(f, t.data(), eps);
    const double e = max_relative_error(analytic, numeric);
    r.checked += t.numel();
    if (e > r.worst) {
      r.worst = e;
      r.worst_name = name;
    }
  }
  return r;
}

}  // namespace tall::testing
