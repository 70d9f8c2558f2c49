// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tall/autograd.hpp"
#include "tall/kernels.hpp"

namespace tall {

inline constexpr double kLayerNormEps = 1e-5;
/// Logit assigned to disallowed attention positions. Relative to any allowed
/// logit its exponential underflows to exactly 0, so masked keys are skipped.
inline constexpr double kMaskedLogit = -1e9;

namespace detail {

inline void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

inline void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_rank2(Var a, const char* op) {
  if (a.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

inline std::vector<double> copy(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n]
inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernel::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  const auto ia = a.id, ib = b.id;
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape->emit({m, n}, std::move(out), ga || gb, [=](Tape& t, std::uint32_t self) {
    const double* dc = t.grad_buffer(self).data();
    if (ga) kernel::gemm_nt(dc, t.data(ib).data(), t.grad_buffer(ia).data(), m, n, k, true);
    if (gb) kernel::gemm_tn(t.data(ia).data(), dc, t.grad_buffer(ib).data(), m, k, n, true);
  });
}

/// a[m x k] * b[n x k]^T
inline Var matmul_nt(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  kernel::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  const auto ia = a.id, ib = b.id;
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape->emit({m, n}, std::move(out), ga || gb, [=](Tape& t, std::uint32_t self) {
    const double* dc = t.grad_buffer(self).data();
    if (ga) kernel::gemm_nn(dc, t.data(ib).data(), t.grad_buffer(ia).data(), m, n, k, true);
    if (gb) kernel::gemm_tn(dc, t.data(ia).data(), t.grad_buffer(ib).data(), m, n, k, true);
  });
}

/// x[..., in] * w[in x out] (+ b[out]); applies to every row of x.
inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
  detail::require_same_tape(x, w);
  detail::require_rank2(w, "linear");
  const std::size_t in = w.shape()[0], out_dim = w.shape()[1];
  if (x.cols() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  if (b && (b->shape().size() != 1 || b->shape()[0] != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  const std::size_t rows = x.rows();
  std::vector<double> out(rows * out_dim);
  kernel::gemm_nn(x.data().data(), w.data().data(), out.data(), rows, in, out_dim, false);
  if (b) {
    const double* bias = b->data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = out.data() + r * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) row[j] += bias[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  const auto ix = x.id, iw = w.id;
  const std::uint32_t ib = b ? b->id : 0;
  const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b && b->requires_grad();
  return x.tape->emit(std::move(shape), std::move(out), gx || gw || gb,
                      [=](Tape& t, std::uint32_t self) {
                        const double* dy = t.grad_buffer(self).data();
                        if (gx) {
                          kernel::gemm_nt(dy, t.data(iw).data(), t.grad_buffer(ix).data(), rows,
                                          out_dim, in, true);
                        }
                        if (gw) {
                          kernel::gemm_tn(t.data(ix).data(), dy, t.grad_buffer(iw).data(), rows,
                                          in, out_dim, true);
                        }
                        if (gb) {
                          double* db = t.grad_buffer(ib).data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t j = 0; j < out_dim; ++j) db[j] += dy[r * out_dim + j];
                          }
                        }
                      });
}

/// x[..., n] + b[n], broadcast over rows.
inline Var add_bias(Var x, Var b) {
  detail::require_same_tape(x, b);
  const std::size_t n = x.cols();
  if (b.shape().size() != 1 || b.shape()[0] != n) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match input " + shape_str(x.shape()));
  }
  auto xv = x.data(), bv = b.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % n];
  const auto ix = x.id, ib = b.id;
  const bool gx = x.requires_grad(), gb = b.requires_grad();
  return x.tape->emit(x.shape(), std::move(out), gx || gb, [=](Tape& t, std::uint32_t self) {
    auto dy = t.grad_buffer(self);
    if (gx) {
      auto dx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
    if (gb) {
      auto db = t.grad_buffer(ib);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i % n] += dy[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto ia = a.id, ib = b.id;
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape->emit(a.shape(), std::move(out), ga || gb, [=](Tape& t, std::uint32_t self) {
    auto dy = t.grad_buffer(self);
    if (ga) {
      auto da = t.grad_buffer(ia);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (gb) {
      auto db = t.grad_buffer(ib);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto ia = a.id, ib = b.id;
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape->emit(a.shape(), std::move(out), ga || gb, [=](Tape& t, std::uint32_t self) {
    auto dy = t.grad_buffer(self);
    if (ga) {
      auto da = t.grad_buffer(ia);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (gb) {
      auto db = t.grad_buffer(ib);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto ia = a.id, ib = b.id;
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape->emit(a.shape(), std::move(out), ga || gb, [=](Tape& t, std::uint32_t self) {
    auto dy = t.grad_buffer(self);
    if (ga) {
      auto da = t.grad_buffer(ia);
      auto bd = t.data(ib);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bd[i];
    }
    if (gb) {
      auto db = t.grad_buffer(ib);
      auto ad = t.data(ia);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * ad[i];
    }
  });
}

inline Var scale(Var a, double s) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  const auto ia = a.id;
  return a.tape->emit(a.shape(), std::move(out), a.requires_grad(),
                      [=](Tape& t, std::uint32_t self) {
                        auto dy = t.grad_buffer(self);
                        auto da = t.grad_buffer(ia);
                        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * s;
                      });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// Sum of all elements, as a shape-[1] scalar.
inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const auto ia = a.id;
  return a.tape->emit({1}, {total}, a.requires_grad(), [=](Tape& t, std::uint32_t self) {
    const double g = t.grad_buffer(self)[0];
    for (double& d : t.grad_buffer(ia)) d += g;
  });
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form).
inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline Var gelu(Var x) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(xv[i]);
  const auto ix = x.id;
  return x.tape->emit(x.shape(), std::move(out), x.requires_grad(),
                      [=](Tape& t, std::uint32_t self) {
                        auto dy = t.grad_buffer(self);
                        auto dx = t.grad_buffer(ix);
                        auto xd = t.data(ix);
                        constexpr double inv_sqrt_2pi = 0.3989422804014327;
                        for (std::size_t i = 0; i < dy.size(); ++i) {
                          const double v = xd[i];
                          const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                          dx[i] += dy[i] * (cdf + v * pdf);
                        }
                      });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis` with max-subtraction.
inline Var softmax(Var x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  const auto ix = x.id;
  return x.tape->emit(shape, std::move(out), x.requires_grad(), [=](Tape& t, std::uint32_t self) {
    auto dy = t.grad_buffer(self);
    auto y = t.data(self);
    auto dx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += dy[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = base + j * inner;
          dx[k] += y[k] * (dy[k] - dot);
        }
      }
    }
  });
}

/// Layer normalization over the last axis with population variance.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  const std::size_t d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.rows();
  auto xv = x.data();
  auto g = gamma.data();
  auto b = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  const auto ix = x.id, ig = gamma.id, ib = beta.id;
  const bool gx = x.requires_grad(), gg = gamma.requires_grad(), gb = beta.requires_grad();
  return x.tape->emit(x.shape(), std::move(out), gx || gg || gb,
                      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                std::uint32_t self) {
                        auto dy = t.grad_buffer(self);
                        auto gv = t.data(ig);
                        if (gg) {
                          auto dg = t.grad_buffer(ig);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t j = 0; j < d; ++j) dg[j] += dy[r * d + j] * xhat[r * d + j];
                          }
                        }
                        if (gb) {
                          auto db = t.grad_buffer(ib);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
                          }
                        }
                        if (gx) {
                          auto dx = t.grad_buffer(ix);
                          const double inv_d = 1.0 / static_cast<double>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            double mean_g = 0.0, mean_gx = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                              const double gj = dy[r * d + j] * gv[j];
                              mean_g += gj;
                              mean_gx += gj * xhat[r * d + j];
                            }
                            mean_g *= inv_d;
                            mean_gx *= inv_d;
                            for (std::size_t j = 0; j < d; ++j) {
                              const double gj = dy[r * d + j] * gv[j];
                              dx[r * d + j] += inv_std[r] * (gj - mean_g - xhat[r * d + j] * mean_gx);
                            }
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Indexing

/// Gathers rows of table[V x d] for each id; returns [ids.size() x d].
inline Var embedding(Var table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  auto tv = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const auto it = table.id;
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->emit({ids.size(), d}, std::move(out), table.requires_grad(),
                          [=, idv = std::move(idv)](Tape& t, std::uint32_t self) {
                            auto dy = t.grad_buffer(self);
                            auto dt = t.grad_buffer(it);
                            for (std::size_t i = 0; i < idv.size(); ++i) {
                              double* row = dt.data() + static_cast<std::size_t>(idv[i]) * d;
                              for (std::size_t j = 0; j < d; ++j) row[j] += dy[i * d + j];
                            }
                          });
}

/// First `count` rows of a matrix.
inline Var head_rows(Var a, std::size_t count) {
  detail::require_rank2(a, "head_rows");
  const std::size_t d = a.shape()[1];
  if (count == 0 || count > a.shape()[0]) {
    throw ShapeError("head_rows: cannot take " + std::to_string(count) + " rows of " + shape_str(a.shape()));
  }
  auto av = a.data();
  std::vector<double> out(av.begin(), av.begin() + static_cast<std::ptrdiff_t>(count * d));
  const auto ia = a.id;
  return a.tape->emit({count, d}, std::move(out), a.requires_grad(), [=](Tape& t, std::uint32_t self) {
    auto dy = t.grad_buffer(self);
    auto da = t.grad_buffer(ia);
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
  });
}

/// Stacks a[ra x d] on top of b[rb x d].
inline Var concat_rows(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_rank2(a, "concat_rows");
  detail::require_rank2(b, "concat_rows");
  if (a.shape()[1] != b.shape()[1]) {
    throw ShapeError("concat_rows: widths differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t na = a.numel();
  std::vector<double> out = detail::copy(a.data());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const auto ia = a.id, ib = b.id;
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape->emit({a.shape()[0] + b.shape()[0], a.shape()[1]}, std::move(out), ga || gb,
                      [=](Tape& t, std::uint32_t self) {
                        auto dy = t.grad_buffer(self);
                        if (ga) {
                          auto da = t.grad_buffer(ia);
                          for (std::size_t i = 0; i < na; ++i) da[i] += dy[i];
                        }
                        if (gb) {
                          auto db = t.grad_buffer(ib);
                          for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[na + i];
                        }
                      });
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention over `n_heads` column blocks of q[Lq x d],
/// k[Lk x d], v[Lk x d]; heads are concatenated back into [Lq x d].
inline Var attention(Var q, Var k, Var v, const Mask& mask, std::size_t n_heads) {
  detail::require_same_tape(q, k);
  detail::require_same_tape(q, v);
  detail::require_rank2(q, "attention");
  detail::require_rank2(k, "attention");
  detail::require_rank2(v, "attention");
  const std::size_t lq = q.shape()[0], lk = k.shape()[0], d = q.shape()[1];
  if (k.shape()[1] != d || v.shape() != k.shape()) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()) + " are inconsistent");
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  if (mask.rows() != lq || mask.cols() != lk) {
    throw ShapeError("attention: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     " does not match " + std::to_string(lq) + "x" + std::to_string(lk));
  }
  for (std::size_t i = 0; i < lq; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < lk && !any; ++j) any = mask.allowed(i, j);
    if (!any) throw ContractError("attention: query row " + std::to_string(i) + " is fully masked");
  }
  const std::size_t hd = d / n_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  auto qv = q.data(), kv = k.data(), vv = v.data();
  std::vector<double> probs(n_heads * lq * lk, 0.0);
  std::vector<double> out(lq * d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < lq; ++i) {
      double* p = probs.data() + (h * lq + i) * lk;
      const double* qi = qv.data() + i * d + off;
      double mx = kMaskedLogit;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.allowed(i, j)) continue;
        const double* kj = kv.data() + j * d + off;
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        s *= scl;
        p[j] = s;
        mx = std::max(mx, s);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.allowed(i, j)) continue;
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      double* oi = out.data() + i * d + off;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.allowed(i, j)) continue;
        p[j] /= total;
        const double* vj = vv.data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
      }
    }
  }
  const auto iq = q.id, ik = k.id, iv = v.id;
  const bool gq = q.requires_grad(), gk = k.requires_grad(), gv = v.requires_grad();
  return q.tape->emit(
      {lq, d}, std::move(out), gq || gk || gv,
      [=, probs = std::move(probs), mask = mask](Tape& t, std::uint32_t self) {
        auto dout = t.grad_buffer(self);
        auto qd = t.data(iq), kd = t.data(ik), vd = t.data(iv);
        std::span<double> dq, dk, dv;
        if (gq) dq = t.grad_buffer(iq);
        if (gk) dk = t.grad_buffer(ik);
        if (gv) dv = t.grad_buffer(iv);
        std::vector<double> dp(lk);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t i = 0; i < lq; ++i) {
            const double* p = probs.data() + (h * lq + i) * lk;
            const double* doi = dout.data() + i * d + off;
            double row_dot = 0.0;
            for (std::size_t j = 0; j < lk; ++j) {
              if (!mask.allowed(i, j)) continue;
              const double* vj = vd.data() + j * d + off;
              double s = 0.0;
              for (std::size_t c = 0; c < hd; ++c) s += doi[c] * vj[c];
              dp[j] = s;
              row_dot += p[j] * s;
              if (gv) {
                double* dvj = dv.data() + j * d + off;
                for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[j] * doi[c];
              }
            }
            if (!gq && !gk) continue;
            const double* qi = qd.data() + i * d + off;
            for (std::size_t j = 0; j < lk; ++j) {
              if (!mask.allowed(i, j)) continue;
              const double ds = p[j] * (dp[j] - row_dot) * scl;
              if (gq) {
                const double* kj = kd.data() + j * d + off;
                double* dqi = dq.data() + i * d + off;
                for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
              }
              if (gk) {
                double* dkj = dk.data() + j * d + off;
                for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over the batch of -log softmax(logits[i, lengths[i]-1, :])[targets[i][lengths[i]-1]].
/// `logits` is [batch x seq x V] or [seq x V] (batch of one). Every other
/// position receives an exactly zero gradient.
inline Var cross_entropy_last_token(Var logits, const std::vector<std::vector<int>>& targets,
                                    std::span<const std::size_t> lengths) {
  const Shape& shape = logits.shape();
  if (shape.size() != 2 && shape.size() != 3) {
    throw ShapeError("cross_entropy_last_token: expected [batch x seq x V] logits, got " + shape_str(shape));
  }
  const std::size_t batch = shape.size() == 3 ? shape[0] : 1;
  const std::size_t seq = shape[shape.size() - 2];
  const std::size_t vocab = shape.back();
  if (targets.size() != batch || lengths.size() != batch) {
    throw ShapeError("cross_entropy_last_token: batch of " + std::to_string(batch) + " but " +
                     std::to_string(targets.size()) + " target rows and " +
                     std::to_string(lengths.size()) + " lengths");
  }
  auto lv = logits.data();
  std::vector<std::size_t> rows(batch);
  std::vector<int> tgt(batch);
  std::vector<double> probs(batch * vocab);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t len = lengths[i];
    if (len < 1 || len > seq || targets[i].size() < len) {
      throw ContractError("cross_entropy_last_token: invalid length " + std::to_string(len) +
                          " for example " + std::to_string(i));
    }
    const int target = targets[i][len - 1];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw IndexError("cross_entropy_last_token: target id " + std::to_string(target) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    rows[i] = i * seq + (len - 1);
    tgt[i] = target;
    const double* row = lv.data() + rows[i] * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - mx);
    const double log_z = mx + std::log(total);
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(row[j] - log_z);
    loss += log_z - row[target];
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  const auto il = logits.id;
  return logits.tape->emit({1}, {loss * inv_b}, logits.requires_grad(),
                           [=, rows = std::move(rows), tgt = std::move(tgt),
                            probs = std::move(probs)](Tape& t, std::uint32_t self) {
                             const double g = t.grad_buffer(self)[0] * inv_b;
                             auto dl = t.grad_buffer(il);
                             for (std::size_t i = 0; i < rows.size(); ++i) {
                               double* drow = dl.data() + rows[i] * vocab;
                               for (std::size_t j = 0; j < vocab; ++j) drow[j] += g * probs[i * vocab + j];
                               drow[tgt[i]] -= g;
                             }
                           });
}

/// Mean token cross-entropy over rows of logits[N x V]; rows whose target
/// equals `ignore_id` are excluded.
inline Var cross_entropy(Var logits, std::span<const int> targets, int ignore_id = -1) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  auto lv = logits.data();
  std::vector<double> probs(n * vocab, 0.0);
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(targets[i]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    const double* row = lv.data() + i * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - mx);
    const double log_z = mx + std::log(total);
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(row[j] - log_z);
    loss += log_z - row[targets[i]];
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: every target is ignored");
  const double inv_n = 1.0 / static_cast<double>(counted);
  std::vector<int> tgt(targets.begin(), targets.end());
  const auto il = logits.id;
  return logits.tape->emit({1}, {loss * inv_n}, logits.requires_grad(),
                           [=, tgt = std::move(tgt), probs = std::move(probs)](Tape& t,
                                                                              std::uint32_t self) {
                             const double g = t.grad_buffer(self)[0] * inv_n;
                             auto dl = t.grad_buffer(il);
                             for (std::size_t i = 0; i < n; ++i) {
                               if (tgt[i] == ignore_id) continue;
                               double* drow = dl.data() + i * vocab;
                               for (std::size_t j = 0; j < vocab; ++j) drow[j] += g * probs[i * vocab + j];
                               drow[tgt[i]] -= g;
                             }
                           });
}

}  // namespace tall
