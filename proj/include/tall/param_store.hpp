// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tall/autograd.hpp"
#include "tall/error.hpp"
#include "tall/tensor.hpp"

namespace tall {

/// True when `name` is `prefix` itself or lies below it in the dotted hierarchy.
inline bool name_has_prefix(std::string_view name, std::string_view prefix) {
  if (prefix.empty()) return true;
  if (name.size() < prefix.size() || name.substr(0, prefix.size()) != prefix) return false;
  return name.size() == prefix.size() || name[prefix.size()] == '.';
}

struct ParamCounts {
  std::size_t total = 0;
  std::size_t trainable = 0;
};

/// Named parameters with a per-entry frozen flag. Iteration is in name order,
/// which fixes the order of every reduction over parameters.
class ParamStore {
 public:
  struct Entry {
    Tensor tensor;
    bool frozen = false;
  };

  Tensor& add(const std::string& name, Tensor tensor, bool frozen = false) {
    if (entries_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(!frozen);
    auto [it, _] = entries_.emplace(name, Entry{std::move(tensor), frozen});
    return it->second.tensor;
  }

  bool contains(const std::string& name) const { return entries_.contains(name); }

  const Tensor& at(const std::string& name) const { return entry(name).tensor; }
  Tensor& at(const std::string& name) { return entry(name).tensor; }

  bool is_frozen(const std::string& name) const { return entry(name).frozen; }

  /// Freezes every entry under `prefix`; returns how many matched.
  std::size_t freeze(std::string_view prefix) { return set_frozen(prefix, true); }
  std::size_t unfreeze(std::string_view prefix) { return set_frozen(prefix, false); }
  /// Freezes exactly one entry, leaving any entries below it untouched.
  void freeze_entry(const std::string& name) {
    Entry& e = entry(name);
    e.frozen = true;
    e.tensor.set_requires_grad(false);
  }

  /// Exact element counts, total and non-frozen.
  ParamCounts counts() const {
    ParamCounts c;
    for (const auto& [name, e] : entries_) {
      c.total += e.tensor.numel();
      if (!e.frozen) c.trainable += e.tensor.numel();
    }
    return c;
  }

  ParamCounts counts(std::string_view prefix) const {
    ParamCounts c;
    for (const auto& [name, e] : entries_) {
      if (!name_has_prefix(name, prefix)) continue;
      c.total += e.tensor.numel();
      if (!e.frozen) c.trainable += e.tensor.numel();
    }
    return c;
  }

  std::size_t size() const noexcept { return entries_.size(); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::vector<std::string> names(std::string_view prefix = {}) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) {
      if (name_has_prefix(name, prefix)) out.push_back(name);
    }
    return out;
  }

  void zero_grad() {
    for (auto& [name, e] : entries_) {
      if (!e.frozen) e.tensor.zero_grad();
    }
  }

  /// Adds the gradients a tape propagated to this store's trainable tensors.
  void accumulate_grads(const Tape& tape) {
    for (auto& [name, e] : entries_) {
      if (e.frozen) continue;
      auto g = tape.param_grad(e.tensor);
      if (g.empty()) continue;
      auto dst = e.tensor.grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
  }

  /// L2 norm over all trainable gradients.
  double grad_norm() const {
    double sq = 0.0;
    for (const auto& [name, e] : entries_) {
      if (e.frozen) continue;
      for (double g : e.tensor.grad()) sq += g * g;
    }
    return std::sqrt(sq);
  }

  void scale_grads(double factor) {
    for (auto& [name, e] : entries_) {
      if (e.frozen) continue;
      for (double& g : e.tensor.grad()) g *= factor;
    }
  }

  /// Copies entries under `prefix` from `other`, marking them frozen or not.
  void import_from(const ParamStore& other, std::string_view prefix, bool frozen) {
    std::size_t n = 0;
    for (const auto& [name, e] : other.entries_) {
      if (!name_has_prefix(name, prefix)) continue;
      add(name, Tensor(e.tensor.shape(), std::vector<double>(e.tensor.data().begin(), e.tensor.data().end())),
          frozen);
      ++n;
    }
    if (n == 0) throw ContractError("no parameter matches prefix '" + std::string(prefix) + "'");
  }

  /// Overwrites values of existing entries from `other` (shapes must agree).
  void assign_values(const ParamStore& other, std::string_view prefix = {}) {
    for (const auto& [name, e] : other.entries_) {
      if (!name_has_prefix(name, prefix)) continue;
      Tensor& dst = at(name);
      if (dst.shape() != e.tensor.shape()) {
        throw ShapeError("parameter '" + name + "' has shape " + shape_str(dst.shape()) + ", source has " +
                         shape_str(e.tensor.shape()));
      }
      std::copy(e.tensor.data().begin(), e.tensor.data().end(), dst.data().begin());
    }
  }

 private:
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IndexError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t set_frozen(std::string_view prefix, bool frozen) {
    std::size_t n = 0;
    for (auto& [name, e] : entries_) {
      if (!name_has_prefix(name, prefix)) continue;
      e.frozen = frozen;
      e.tensor.set_requires_grad(!frozen);
      ++n;
    }
    if (n == 0) throw ContractError("no parameter matches prefix '" + std::string(prefix) + "'");
    return n;
  }

  std::map<std::string, Entry, std::less<>> entries_;
};

}  // namespace tall
