// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Central-difference gradient estimates. These only evaluate the forward
// function and never touch the tape, so they serve as an independent check
// of backward().

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace tall {

/// (f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps) for every coordinate i.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> theta, double eps) {
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + eps;
    const double up = f(point);
    point[i] = saved - eps;
    const double down = f(point);
    point[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// In-place variant: perturbs `values` directly and calls `f()` with no
/// arguments. Used when the parameters live inside a larger structure.
inline std::vector<double> finite_diff_grad_inplace(const std::function<double()>& f, std::span<double> values,
                                                    double eps) {
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = f();
    values[i] = saved - eps;
    const double down = f();
    values[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// Relative error with an absolute floor: |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size() && i < numeric.size(); ++i) {
    worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
  }
  return worst;
}

}  // namespace tall
