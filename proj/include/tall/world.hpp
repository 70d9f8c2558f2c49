// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic bilingual world. The high-resource (HR) language is sampled from
// an order-2 Markov grammar; the low-resource (LR) language is a deterministic
// transform of it: a seeded word substitution followed by swapping each
// adjacent pair of tokens.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tall/error.hpp"
#include "tall/random.hpp"

namespace tall {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumSpecials = 4;

struct GrammarConfig {
  std::size_t vocab_words = 96;
  std::size_t min_len = 5;
  std::size_t max_len = 12;
  /// Candidate successors per previous word.
  std::size_t successors = 4;
  /// Spread of the log-weights over candidates; larger is more peaked.
  double sharpness = 1.5;
  /// Probability mass spread uniformly over every word.
  double noise = 0.02;
  std::uint64_t seed = 1;

  bool operator==(const GrammarConfig&) const = default;
};

class ToyGrammar {
 public:
  explicit ToyGrammar(const GrammarConfig& cfg) : cfg_(cfg) {
    if (cfg.vocab_words < 2 || cfg.min_len < 1 || cfg.max_len < cfg.min_len) {
      throw ConfigError("grammar: need >= 2 words and 1 <= min_len <= max_len");
    }
    if (cfg.successors < 1 || cfg.successors > cfg.vocab_words || cfg.noise < 0.0 || cfg.noise > 1.0) {
      throw ConfigError("grammar: successors must be in [1, vocab_words] and noise in [0, 1]");
    }
    build();
  }

  /// The training grammar blended with an independently seeded grammar:
  /// row = (1 - shift) * base + shift * other.
  static ToyGrammar shifted(const ToyGrammar& base, double shift, std::uint64_t seed) {
    if (shift < 0.0 || shift > 1.0) throw ConfigError("domain shift must lie in [0, 1]");
    GrammarConfig other_cfg = base.cfg_;
    other_cfg.seed = seed;
    const ToyGrammar other(other_cfg);
    ToyGrammar out = base;
    for (std::size_t i = 0; i < out.table_.size(); ++i) {
      out.table_[i] = (1.0 - shift) * base.table_[i] + shift * other.table_[i];
    }
    return out;
  }

  const GrammarConfig& config() const noexcept { return cfg_; }
  std::size_t words() const noexcept { return cfg_.vocab_words; }
  std::size_t contexts() const noexcept { return cfg_.vocab_words + 1; }

  /// Next-word distribution given the two previous words. Context index 0 is
  /// the sentence start; index w + 1 is word w.
  std::span<const double> row(std::size_t prev2, std::size_t prev1) const {
    return {table_.data() + (prev2 * contexts() + prev1) * words(), words()};
  }

  /// Samples a sentence of HR token ids (words offset by the special tokens).
  std::vector<int> sample(Rng& rng) const {
    const std::size_t len = cfg_.min_len + rng.uniform_int(cfg_.max_len - cfg_.min_len + 1);
    std::vector<int> out;
    out.reserve(len);
    std::size_t prev2 = 0, prev1 = 0;
    for (std::size_t i = 0; i < len; ++i) {
      auto dist = row(prev2, prev1);
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t word = dist.size() - 1;
      for (std::size_t w = 0; w < dist.size(); ++w) {
        acc += dist[w];
        if (u < acc) {
          word = w;
          break;
        }
      }
      out.push_back(kNumSpecials + static_cast<int>(word));
      prev2 = prev1;
      prev1 = word + 1;
    }
    return out;
  }

 private:
  void build() {
    const std::size_t w = words(), c = contexts(), k = cfg_.successors;
    std::vector<std::vector<std::size_t>> candidates(c);
    for (std::size_t b = 0; b < c; ++b) {
      Rng rng(derive_seed(cfg_.seed, b));
      std::vector<std::size_t> all(w);
      std::iota(all.begin(), all.end(), 0);
      rng.shuffle(std::span<std::size_t>(all));
      candidates[b].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
    }
    table_.assign(c * c * w, cfg_.noise / static_cast<double>(w));
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t b = 0; b < c; ++b) {
        Rng rng(derive_seed(cfg_.seed ^ 0x5bd1e995ULL, a * c + b));
        std::vector<double> weight(k);
        double total = 0.0;
        for (auto& x : weight) {
          x = std::exp(cfg_.sharpness * rng.normal());
          total += x;
        }
        double* r = table_.data() + (a * c + b) * w;
        for (std::size_t j = 0; j < k; ++j) r[candidates[b][j]] += (1.0 - cfg_.noise) * weight[j] / total;
      }
    }
  }

  GrammarConfig cfg_;
  std::vector<double> table_;
};

/// Seeded word substitution plus adjacent-pair swap between HR and LR token
/// ids. Both languages use the same special ids and word range
/// [kNumSpecials, kNumSpecials + words) in their own token spaces.
class Cipher {
 public:
  Cipher(std::size_t words, std::uint64_t seed, bool identity = false)
      : words_(words), identity_(identity), forward_(words), inverse_(words) {
    std::iota(forward_.begin(), forward_.end(), 0);
    if (!identity) {
      Rng rng(derive_seed(seed, 0xC1F3));
      rng.shuffle(std::span<int>(forward_));
    }
    for (std::size_t i = 0; i < words; ++i) inverse_[static_cast<std::size_t>(forward_[i])] = static_cast<int>(i);
  }

  std::size_t words() const noexcept { return words_; }
  bool identity() const noexcept { return identity_; }

  int substitute(int hr_token) const { return kNumSpecials + forward_[word_index(hr_token, "HR")]; }
  int unsubstitute(int lr_token) const { return kNumSpecials + inverse_[word_index(lr_token, "LR")]; }

  std::vector<int> lr_of_hr(std::span<const int> hr) const {
    std::vector<int> out(hr.size());
    for (std::size_t i = 0; i < hr.size(); ++i) out[i] = substitute(hr[i]);
    if (!identity_) swap_pairs(out);
    return out;
  }

  std::vector<int> hr_of_lr(std::span<const int> lr) const {
    std::vector<int> out(lr.size());
    for (std::size_t i = 0; i < lr.size(); ++i) out[i] = unsubstitute(lr[i]);
    if (!identity_) swap_pairs(out);
    return out;
  }

 private:
  std::size_t word_index(int token, const char* side) const {
    if (token < kNumSpecials || token >= kNumSpecials + static_cast<int>(words_)) {
      throw IndexError(std::string(side) + " token " + std::to_string(token) + " is not a word id");
    }
    return static_cast<std::size_t>(token - kNumSpecials);
  }

  static void swap_pairs(std::vector<int>& v) {
    for (std::size_t i = 0; i + 1 < v.size(); i += 2) std::swap(v[i], v[i + 1]);
  }

  std::size_t words_;
  bool identity_;
  std::vector<int> forward_;
  std::vector<int> inverse_;
};

struct BilingualPair {
  std::vector<int> hr;
  std::vector<int> lr;

  bool operator==(const BilingualPair&) const = default;
};

/// `n` pairs with distinct HR sentences. Candidate i is sampled from a stream
/// seeded by (seed, i), so the corpus is a pure function of its inputs;
/// duplicates, and sentences whose HR side appears in `exclude`, are skipped
/// in index order.
inline std::vector<BilingualPair> generate_corpus(std::uint64_t seed, std::size_t n, const ToyGrammar& grammar,
                                                  const Cipher& cipher, std::span<const BilingualPair> exclude = {}) {
  if (n == 0) throw ConfigError("corpus size must be at least 1");
  const std::size_t budget = 20 * n + 1000;
  std::set<std::vector<int>> seen;
  for (const auto& p : exclude) seen.insert(p.hr);
  std::vector<BilingualPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < budget && out.size() < n; ++i) {
    Rng rng(derive_seed(seed, i));
    std::vector<int> hr = grammar.sample(rng);
    if (!seen.insert(hr).second) continue;
    std::vector<int> lr = cipher.lr_of_hr(hr);
    out.push_back({std::move(hr), std::move(lr)});
  }
  if (out.size() < n) {
    throw ConfigError("could not draw " + std::to_string(n) + " unique sentences within " + std::to_string(budget) +
                      " attempts (got " + std::to_string(out.size()) + ")");
  }
  return out;
}

/// Token-id tables between the translator spaces (HR, LR) and the language
/// model space, which holds the specials, then the HR words, then the LR words.
class TokenSpaces {
 public:
  explicit TokenSpaces(std::size_t words) : words_(words) {}

  std::size_t words() const noexcept { return words_; }
  std::size_t hr_vocab() const noexcept { return kNumSpecials + words_; }
  std::size_t lr_vocab() const noexcept { return kNumSpecials + words_; }
  std::size_t llm_vocab() const noexcept { return kNumSpecials + 2 * words_; }

  int hr_to_llm(int hr) const {
    if (hr < 0 || hr >= static_cast<int>(hr_vocab())) return kUnk;
    return hr;
  }
  int lr_to_llm(int lr) const {
    if (lr < 0 || lr >= static_cast<int>(lr_vocab())) return kUnk;
    return lr < kNumSpecials ? lr : lr + static_cast<int>(words_);
  }
  /// -1 for LLM ids outside the LR word range.
  int llm_to_lr(int llm) const {
    const int lo = kNumSpecials + static_cast<int>(words_);
    if (llm < lo || llm >= static_cast<int>(llm_vocab())) return -1;
    return llm - static_cast<int>(words_);
  }
  /// -1 for LLM ids outside the HR word range.
  int llm_to_hr(int llm) const {
    if (llm < kNumSpecials || llm >= kNumSpecials + static_cast<int>(words_)) return -1;
    return llm;
  }

  bool is_word(int token) const { return token >= kNumSpecials && token < kNumSpecials + static_cast<int>(words_); }

 private:
  std::size_t words_;
};

}  // namespace tall
