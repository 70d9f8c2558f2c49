// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Transformer building blocks over a ParamStore. Every block is a pair of
// functions: init_* registers named parameters under a prefix, and the
// forward function reads them back from the store by the same names.

#pragma once

#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tall/autograd.hpp"
#include "tall/ops.hpp"
#include "tall/param_store.hpp"
#include "tall/random.hpp"

namespace tall {

inline constexpr double kInitStd = 0.02;

struct AttentionConfig {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  bool causal = false;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ShapeError("attention: d_model " + std::to_string(d_model) + " not divisible by " +
                       std::to_string(n_heads) + " heads");
    }
  }
};

/// Linear(d_in -> d_hidden) -> LayerNorm -> GELU -> Linear(d_hidden -> d_out) -> LayerNorm.
struct AdapterSpec {
  std::size_t d_in = 0;
  std::size_t d_hidden = 0;
  std::size_t d_out = 0;

  void validate() const {
    if (d_in == 0 || d_hidden == 0 || d_out == 0) throw ShapeError("adapter dimensions must be positive");
  }
  bool operator==(const AdapterSpec&) const = default;
};

struct TransformerConfig {
  std::size_t n_layers = 1;
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  std::size_t d_ff = 0;
  bool causal = false;
  bool cross_attention = false;
  /// Width of the cross-attention memory; 0 means d_model.
  std::size_t d_cross = 0;
  /// Rows of the learned absolute position table; 0 disables it.
  std::size_t max_positions = 0;

  std::size_t cross_width() const { return d_cross ? d_cross : d_model; }

  void validate() const {
    AttentionConfig{d_model, n_heads, causal}.validate();
    if (n_layers == 0 || d_ff == 0) throw ShapeError("transformer needs at least one layer and d_ff > 0");
  }
  bool operator==(const TransformerConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter counts (closed form)

inline std::size_t linear_param_count(std::size_t in, std::size_t out) { return in * out + out; }
inline std::size_t layer_norm_param_count(std::size_t d) { return 2 * d; }

inline std::size_t adapter_param_count(const AdapterSpec& s) {
  return linear_param_count(s.d_in, s.d_hidden) + layer_norm_param_count(s.d_hidden) +
         linear_param_count(s.d_hidden, s.d_out) + layer_norm_param_count(s.d_out);
}

inline std::size_t attention_param_count(std::size_t d_model, std::size_t d_kv) {
  return 2 * linear_param_count(d_model, d_model) + 2 * linear_param_count(d_kv, d_model);
}

inline std::size_t transformer_layer_param_count(const TransformerConfig& c) {
  std::size_t n = layer_norm_param_count(c.d_model) + attention_param_count(c.d_model, c.d_model);
  if (c.cross_attention) {
    n += layer_norm_param_count(c.d_model) + attention_param_count(c.d_model, c.cross_width());
  }
  n += layer_norm_param_count(c.d_model) + linear_param_count(c.d_model, c.d_ff) +
       linear_param_count(c.d_ff, c.d_model);
  return n;
}

inline std::size_t transformer_stack_param_count(const TransformerConfig& c) {
  return c.max_positions * c.d_model + c.n_layers * transformer_layer_param_count(c) +
         layer_norm_param_count(c.d_model);
}

// ---------------------------------------------------------------------------
// Primitive blocks

inline Tensor random_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

inline void init_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  store.add(prefix + ".weight", random_normal({in, out}, kInitStd, rng));
  store.add(prefix + ".bias", Tensor({out}, 0.0));
}

inline Var linear_forward(Tape& tape, const ParamStore& store, const std::string& prefix, Var x) {
  return linear(x, tape.param(store.at(prefix + ".weight")), tape.param(store.at(prefix + ".bias")));
}

inline void init_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
  store.add(prefix + ".gamma", Tensor({d}, 1.0));
  store.add(prefix + ".beta", Tensor({d}, 0.0));
}

inline Var layer_norm_forward(Tape& tape, const ParamStore& store, const std::string& prefix, Var x) {
  return layer_norm(x, tape.param(store.at(prefix + ".gamma")), tape.param(store.at(prefix + ".beta")));
}

// ---------------------------------------------------------------------------
// Dimension-alignment adapter

inline void init_adapter(ParamStore& store, const std::string& prefix, const AdapterSpec& spec, Rng& rng) {
  spec.validate();
  init_linear(store, prefix + ".linear1", spec.d_in, spec.d_hidden, rng);
  init_layer_norm(store, prefix + ".ln1", spec.d_hidden);
  init_linear(store, prefix + ".linear2", spec.d_hidden, spec.d_out, rng);
  init_layer_norm(store, prefix + ".ln2", spec.d_out);
}

inline Var adapter_forward(Tape& tape, const ParamStore& store, const std::string& prefix, const AdapterSpec& spec,
                           Var x) {
  if (x.cols() != spec.d_in) {
    throw ShapeError("adapter '" + prefix + "': input " + shape_str(x.shape()) + " but d_in = " +
                     std::to_string(spec.d_in));
  }
  Var h = linear_forward(tape, store, prefix + ".linear1", x);
  h = gelu(layer_norm_forward(tape, store, prefix + ".ln1", h));
  h = linear_forward(tape, store, prefix + ".linear2", h);
  return layer_norm_forward(tape, store, prefix + ".ln2", h);
}

// ---------------------------------------------------------------------------
// Attention

inline void init_attention(ParamStore& store, const std::string& prefix, std::size_t d_model, std::size_t d_kv,
                           Rng& rng) {
  init_linear(store, prefix + ".q", d_model, d_model, rng);
  init_linear(store, prefix + ".k", d_kv, d_model, rng);
  init_linear(store, prefix + ".v", d_kv, d_model, rng);
  init_linear(store, prefix + ".o", d_model, d_model, rng);
}

/// Projects queries from q_in and keys/values from kv_in, attends per head
/// with scale 1/sqrt(head_dim), and applies the output projection.
inline Var multi_head_attention(Tape& tape, const ParamStore& store, const std::string& prefix, Var q_in,
                                Var kv_in, const Mask& mask, const AttentionConfig& cfg) {
  cfg.validate();
  Var q = linear_forward(tape, store, prefix + ".q", q_in);
  Var k = linear_forward(tape, store, prefix + ".k", kv_in);
  Var v = linear_forward(tape, store, prefix + ".v", kv_in);
  Var ctx = attention(q, k, v, mask, cfg.n_heads);
  return linear_forward(tape, store, prefix + ".o", ctx);
}

// ---------------------------------------------------------------------------
// Transformer layer and stack

inline void init_transformer_layer(ParamStore& store, const std::string& prefix, const TransformerConfig& c,
                                   Rng& rng) {
  init_layer_norm(store, prefix + ".ln_self", c.d_model);
  init_attention(store, prefix + ".self_attn", c.d_model, c.d_model, rng);
  if (c.cross_attention) {
    init_layer_norm(store, prefix + ".ln_cross", c.d_model);
    init_attention(store, prefix + ".cross_attn", c.d_model, c.cross_width(), rng);
  }
  init_layer_norm(store, prefix + ".ln_ffn", c.d_model);
  init_linear(store, prefix + ".ffn.fc1", c.d_model, c.d_ff, rng);
  init_linear(store, prefix + ".ffn.fc2", c.d_ff, c.d_model, rng);
}

/// Pre-LayerNorm residual block:
///   x += SelfAttn(LN(x)); [x += CrossAttn(LN(x), memory)]; x += FFN(LN(x))
/// with FFN = Linear(d -> d_ff) . GELU . Linear(d_ff -> d).
inline Var transformer_layer_forward(Tape& tape, const ParamStore& store, const std::string& prefix,
                                     const TransformerConfig& c, Var x, std::optional<Var> cross_kv,
                                     const Mask& self_mask, const std::optional<Mask>& cross_mask = std::nullopt) {
  if (x.cols() != c.d_model) {
    throw ShapeError("transformer layer '" + prefix + "': input " + shape_str(x.shape()) + " but d_model = " +
                     std::to_string(c.d_model));
  }
  const AttentionConfig attn{c.d_model, c.n_heads, c.causal};
  Var h = layer_norm_forward(tape, store, prefix + ".ln_self", x);
  x = x + multi_head_attention(tape, store, prefix + ".self_attn", h, h, self_mask, attn);
  if (c.cross_attention) {
    if (!cross_kv) throw ContractError("transformer layer '" + prefix + "' needs a cross-attention memory");
    if (cross_kv->cols() != c.cross_width()) {
      throw ShapeError("transformer layer '" + prefix + "': memory " + shape_str(cross_kv->shape()) +
                       " but d_cross = " + std::to_string(c.cross_width()));
    }
    const Mask full = cross_mask ? *cross_mask : Mask::full(x.rows(), cross_kv->rows());
    h = layer_norm_forward(tape, store, prefix + ".ln_cross", x);
    x = x + multi_head_attention(tape, store, prefix + ".cross_attn", h, *cross_kv, full,
                                 AttentionConfig{c.d_model, c.n_heads, false});
  }
  h = layer_norm_forward(tape, store, prefix + ".ln_ffn", x);
  h = gelu(linear_forward(tape, store, prefix + ".ffn.fc1", h));
  return x + linear_forward(tape, store, prefix + ".ffn.fc2", h);
}

inline void init_transformer_stack(ParamStore& store, const std::string& prefix, const TransformerConfig& c,
                                   Rng& rng) {
  c.validate();
  if (c.max_positions > 0) store.add(prefix + ".pos", random_normal({c.max_positions, c.d_model}, kInitStd, rng));
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    init_transformer_layer(store, prefix + ".layers." + std::to_string(i), c, rng);
  }
  init_layer_norm(store, prefix + ".ln_f", c.d_model);
}

/// Adds learned positions 0..L-1 from `table_name` to x[L x d].
inline Var add_positions(Tape& tape, const ParamStore& store, const std::string& table_name, Var x) {
  const Tensor& table = store.at(table_name);
  const std::size_t len = x.rows();
  if (len > table.dim(0)) {
    throw ShapeError("sequence of length " + std::to_string(len) + " exceeds position table '" + table_name +
                     "' with " + std::to_string(table.dim(0)) + " rows");
  }
  std::vector<int> positions(len);
  std::iota(positions.begin(), positions.end(), 0);
  return x + embedding(tape.param(table), positions);
}

/// Runs positions (if configured), every layer, and the final LayerNorm.
/// The self-attention mask defaults to causal or full according to the config.
inline Var transformer_stack_forward(Tape& tape, const ParamStore& store, const std::string& prefix,
                                     const TransformerConfig& c, Var x, std::optional<Var> cross_kv = std::nullopt,
                                     const std::optional<Mask>& self_mask = std::nullopt) {
  if (c.max_positions > 0) x = add_positions(tape, store, prefix + ".pos", x);
  const std::size_t len = x.rows();
  const Mask mask = self_mask ? *self_mask : (c.causal ? Mask::causal(len) : Mask::full(len, len));
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    x = transformer_layer_forward(tape, store, prefix + ".layers." + std::to_string(i), c, x, cross_kv, mask);
  }
  return layer_norm_forward(tape, store, prefix + ".ln_f", x);
}

}  // namespace tall
