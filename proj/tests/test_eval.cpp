// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "tall/eval.hpp"
#include "tall/pretrain.hpp"

using namespace tall;

namespace {

constexpr std::size_t kWords = 16;

LlmConfig tiny_llm() { return {kNumSpecials + 2 * kWords, 16, 2, 32, 1, 24}; }

SamplerConfig greedy() {
  SamplerConfig s;
  s.temperature = 0.0;
  return s;
}

EvalDataset random_dataset(std::size_t n, std::uint64_t seed, int final_word = -1) {
  Rng rng(seed);
  EvalDataset d{"random", {}};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> s;
    const std::size_t len = 3 + rng.uniform_int(4);
    for (std::size_t j = 0; j < len; ++j) s.push_back(kNumSpecials + static_cast<int>(rng.uniform_int(kWords)));
    if (final_word >= 0) s.back() = final_word;
    d.sentences.push_back(std::move(s));
  }
  return d;
}

std::size_t recount(const std::vector<EvalRecord>& records, const EvalDataset& d) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < records.size(); ++i) hits += records[i].predicted == d.sentences[i].back();
  return hits;
}

}  // namespace

TEST(Accuracy, CountsAndEmptySet) {
  const std::vector<EvalRecord> r = {{0, 4, 4, true}, {1, 5, 6, false}, {2, 7, 7, true}, {3, 8, 8, true}};
  EXPECT_DOUBLE_EQ(accuracy(r), 0.75);
  EXPECT_THROW(accuracy(std::span<const EvalRecord>{}), ContractError);
  const ResultRow row = make_row("d", "toy", r);
  EXPECT_EQ(row.correct, 3u);
  EXPECT_EQ(row.total, 4u);
  EXPECT_EQ(row.accuracy_percent(), "75.00");
}

TEST(Accuracy, PercentRounding) {
  EXPECT_EQ((ResultRow{"d", Approach::tall, "toy", 1, 3}).accuracy_percent(), "33.33");
  EXPECT_EQ((ResultRow{"d", Approach::tall, "toy", 2, 3}).accuracy_percent(), "66.67");
  EXPECT_EQ((ResultRow{"d", Approach::tall, "toy", 1, 8}).accuracy_percent(), "12.50");
  EXPECT_EQ((ResultRow{"d", Approach::tall, "toy", 1, 80000}).accuracy_percent(), "0.00");
  EXPECT_EQ((ResultRow{"d", Approach::tall, "toy", 1, 20000}).accuracy_percent(), "0.01");
  EXPECT_EQ((ResultRow{"d", Approach::tall, "toy", 7, 7}).accuracy_percent(), "100.00");
}

TEST(Approaches, NamesRoundTrip) {
  for (Approach a : kAllApproaches) EXPECT_EQ(parse_approach(approach_name(a)), a);
  EXPECT_EQ(parse_approach("scratch"), Approach::from_scratch);
  EXPECT_THROW(parse_approach("oracle"), ConfigError);
}

TEST(Dataset, HashSeesSentenceBoundaries) {
  const EvalDataset a{"x", {{4, 5}, {6}}};
  const EvalDataset b{"x", {{4}, {5, 6}}};
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash(), (EvalDataset{"y", {{4, 5}, {6}}}).hash());
  EXPECT_EQ(a.hash().size(), 16u);
}

TEST(Predictor, GeneratorDependsOnExampleIndexOnly) {
  const EvalDataset d = random_dataset(20, 1);
  SamplerConfig s;
  s.seed = 77;
  auto draw = [](std::size_t, std::span<const int>, Rng& rng) { return static_cast<int>(rng.uniform_int(1000)); };
  const auto r1 = evaluate_predictor(d, Approach::direct, s, draw);
  for (std::size_t i = 0; i < d.sentences.size(); ++i) {
    Rng rng = example_rng(s, i);
    EXPECT_EQ(r1[i].predicted, static_cast<int>(rng.uniform_int(1000)));
    EXPECT_EQ(r1[i].gold, d.sentences[i].back());
  }
  EXPECT_THROW(evaluate_predictor(EvalDataset{"e", {}}, Approach::direct, s, draw), ContractError);
  EXPECT_THROW(evaluate_predictor(EvalDataset{"e", {{4}}}, Approach::direct, s, draw), ContractError);
}

TEST(Direct, ForcedOutputIsScoredCorrect) {
  // Final layer norm with gamma = 0 emits beta everywhere, so the logits are
  // the same for every context and peak at the chosen word.
  const LlmConfig cfg = tiny_llm();
  const TokenSpaces spaces(kWords);
  ParamStore s;
  Rng rng(1);
  init_llm(s, cfg, rng);
  const int lr_word = 9;
  const int id = spaces.lr_to_llm(lr_word);
  std::ranges::fill(s.at("llm.ln_f.gamma").data(), 0.0);
  auto beta = s.at("llm.ln_f.beta").data();
  auto row = s.at("llm.embed").data().subspan(static_cast<std::size_t>(id) * cfg.d_model, cfg.d_model);
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    row[j] = 1.0;
    beta[j] = 1.0;
  }
  const auto remap = LlmRemap::lr_range(spaces);
  const EvalDataset hit = random_dataset(25, 2, lr_word);
  const auto r = eval_direct(s, cfg, remap, hit, greedy());
  EXPECT_EQ(accuracy(r), 1.0);
  const EvalDataset miss = random_dataset(25, 3, lr_word + 1);
  const auto m = eval_direct(s, cfg, remap, miss, greedy());
  EXPECT_EQ(accuracy(m), 0.0);
  EXPECT_EQ(m.front().predicted, lr_word);
}

TEST(Naive, OracleComponentsArePlumbedInOrder) {
  const Cipher cipher(kWords, 11);
  const TokenSpaces spaces(kWords);
  const int hr_next = 12;
  NaiveParts parts{[&](std::span<const int> lr) { return cipher.hr_of_lr(lr); },
                   [&](std::span<const int>) {
                     std::vector<double> l(spaces.llm_vocab(), 0.0);
                     l[static_cast<std::size_t>(spaces.hr_to_llm(hr_next))] = 5.0;
                     return l;
                   },
                   [&](std::span<const int> hr) { return cipher.lr_of_hr(hr); },
                   [&](int t) { return spaces.hr_to_llm(t); }, [&](int id) { return spaces.llm_to_hr(id); }};
  const EvalDataset d = random_dataset(30, 4);
  const auto r = eval_naive(parts, d, greedy());
  for (std::size_t i = 0; i < d.sentences.size(); ++i) {
    const auto& s = d.sentences[i];
    std::vector<int> hr = cipher.hr_of_lr(std::span<const int>(s).first(s.size() - 1));
    hr.push_back(hr_next);
    EXPECT_EQ(r[i].predicted, cipher.lr_of_hr(hr).back()) << i;
  }
  EXPECT_EQ(recount(r, d), make_row("d", "toy", r).correct);

  // An LLM choice outside the HR range is unusable.
  parts.llm = [&](std::span<const int>) {
    std::vector<double> l(spaces.llm_vocab(), 0.0);
    l[static_cast<std::size_t>(spaces.lr_to_llm(5))] = 5.0;
    return l;
  };
  Rng rng(1);
  EXPECT_EQ(predict_naive(parts, d.sentences[0], greedy(), rng), -1);
}

TEST(Naive, IdentityWorldMatchesDirectOnHrIds) {
  const LlmConfig cfg = tiny_llm();
  const TokenSpaces spaces(kWords);
  ParamStore llm;
  Rng rng(6);
  init_llm(llm, cfg, rng);
  for (double& v : llm.at("llm.embed").data()) v *= 50.0;
  const auto identity = [](std::span<const int> s) { return std::vector<int>(s.begin(), s.end()); };
  const NaiveParts parts{identity,
                         [&](std::span<const int> ctx) { return llm_next_logits(llm, cfg, ctx); },
                         identity,
                         [&](int t) { return spaces.hr_to_llm(t); },
                         [&](int id) { return spaces.llm_to_hr(id); }};
  const LlmRemap hr_remap{[&](int t) { return spaces.hr_to_llm(t); }, [&](int id) { return spaces.llm_to_hr(id); }};
  SamplerConfig sampler;
  sampler.seed = 3;
  const EvalDataset d = random_dataset(60, 7);
  const auto naive = eval_naive(parts, d, sampler);
  const auto direct = eval_direct(llm, cfg, hr_remap, d, sampler);
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < d.sentences.size(); ++i) {
    EXPECT_EQ(naive[i].predicted, direct[i].predicted) << i;
    distinct += naive[i].predicted != naive[0].predicted;
  }
  EXPECT_GT(distinct, 0u);
}

TEST(SoftPrompt, OnlyThePromptTrains) {
  const LlmConfig cfg;
  ParamStore llm;
  Rng rng(8);
  init_llm(llm, cfg, rng);
  ParamStore s = build_soft_prompt_store(llm, cfg, 30, rng);
  EXPECT_EQ(s.counts().trainable, 2880u);
  EXPECT_EQ(s.counts().total, llm.counts().total + 2880u);

  const TokenSpaces spaces(96);
  const auto remap = LlmRemap::lr_range(spaces);
  EvalDataset d{"d", {{4, 5, 6, 7}, {8, 9, 10}, {11, 12, 13, 14, 15}}};
  const auto examples = make_soft_prompt_examples(d.sentences, remap);
  EXPECT_EQ(examples[1].context, (std::vector<int>{kBos, 104, 105}));
  EXPECT_EQ(examples[1].target, 106);
  const Tensor prompt_before = s.at(kSoftPromptName);
  TrainConfig tc;
  tc.batch_size = 3;
  tc.max_steps = 3;
  train_soft_prompt(s, cfg, examples, tc);
  for (const auto& n : llm.names()) EXPECT_TRUE(s.at(n).bit_equal(llm.at(n))) << n;
  EXPECT_FALSE(s.at(kSoftPromptName).bit_equal(prompt_before));

  s.unfreeze("llm.embed");
  EXPECT_THROW(train_soft_prompt(s, cfg, examples, tc), ContractError);
  EXPECT_THROW(build_soft_prompt_store(llm, cfg, 0, rng), ConfigError);
  EXPECT_THROW(build_soft_prompt_store(llm, cfg, cfg.max_positions, rng), ConfigError);
}

TEST(SoftPrompt, MaskLetsEveryRowSeeThePrompt) {
  const Mask m = soft_prompt_mask(2, 3);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m.allowed(i, j), j < 2 || j <= i) << i << "," << j;
  }
}

TEST(SoftPrompt, GradientReachesOnlyThePrompt) {
  const LlmConfig cfg = tiny_llm();
  ParamStore llm;
  Rng rng(9);
  init_llm(llm, cfg, rng);
  ParamStore s = build_soft_prompt_store(llm, cfg, 4, rng);
  Tape t;
  Var loss = soft_prompt_loss(t, s, cfg, {{kBos, 20, 21}, 22});
  t.backward(loss);
  for (const auto& n : s.names()) EXPECT_EQ(t.param_grad(s.at(n)).empty(), n != kSoftPromptName) << n;
}

TEST(Finetune, ZeroStepsLeavesDirectUnchanged) {
  const LlmConfig cfg = tiny_llm();
  const TokenSpaces spaces(kWords);
  ParamStore base;
  Rng rng(10);
  init_llm(base, cfg, rng);
  const auto remap = LlmRemap::lr_range(spaces);
  const EvalDataset d = random_dataset(30, 11);
  TrainConfig tc;
  tc.epochs = 0;
  tc.max_steps = 0;
  const ParamStore ft = finetune_llm(base, cfg, d.sentences, remap, tc);
  for (const auto& n : base.names()) EXPECT_TRUE(ft.at(n).bit_equal(base.at(n)));
  EXPECT_EQ(ft.counts().trainable, base.counts().total);
  SamplerConfig sampler;
  const auto a = eval_direct(base, cfg, remap, d, sampler);
  const auto b = eval_direct(ft, cfg, remap, d, sampler, Approach::finetuned);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].predicted, b[i].predicted);
  EXPECT_EQ(b.front().approach, Approach::finetuned);
}

TEST(Scratch, LrTrainedModelBeatsHrOnlyDirect) {
  const LlmConfig cfg = tiny_llm();
  const ToyGrammar grammar(GrammarConfig{kWords, 5, 7, 2, 2.0, 0.01, 1});
  const Cipher cipher(kWords, 11);
  const TokenSpaces spaces(kWords);
  const auto pairs = generate_corpus(3, 500, grammar, cipher);
  std::vector<std::vector<int>> hr_llm, lr;
  for (const auto& p : pairs) {
    std::vector<int> h;
    for (int t : p.hr) h.push_back(spaces.hr_to_llm(t));
    hr_llm.push_back(std::move(h));
    lr.push_back(p.lr);
  }
  TrainConfig tc;
  tc.learning_rate = 5e-3;
  tc.batch_size = 8;
  tc.epochs = 15;
  tc.warmup_steps = 10;
  ParamStore base;
  Rng rng(12);
  init_llm(base, cfg, rng);
  train_llm(base, cfg, std::span(hr_llm).first(400), {}, tc);
  const auto remap = LlmRemap::lr_range(spaces);
  const ParamStore scratch = train_scratch_llm(cfg, std::span(lr).first(400), remap, tc, 13);
  EvalDataset held{"held", {lr.begin() + 400, lr.end()}};
  const double direct = accuracy(eval_direct(base, cfg, remap, held, greedy()));
  const double fresh = accuracy(eval_direct(scratch, cfg, remap, held, greedy(), Approach::from_scratch));
  EXPECT_GT(fresh, direct + 0.1) << "direct " << direct << " scratch " << fresh;
}

TEST(Results, TextAndJsonLayout) {
  ResultsTable t{"abc", {{"shifted", "0123456789abcdef"}}, {}};
  for (Approach a : kAllApproaches) t.rows.push_back({"shifted", a, "toy", 1, 3});
  const std::string text = format_results(t);
  EXPECT_NE(text.find("# config abc\n"), std::string::npos);
  EXPECT_NE(text.find("# dataset shifted 0123456789abcdef\n"), std::string::npos);
  EXPECT_NE(text.find("soft_prompt"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3 + 6);
  const auto j = to_json(t);
  ASSERT_EQ(j["rows"].size(), 6u);
  EXPECT_EQ(j["rows"][5]["approach"], "tall");
  EXPECT_EQ(j["rows"][0]["accuracy_percent"], "33.33");
  EXPECT_EQ(j["rows"][0]["correct"], 1);
  EXPECT_EQ(j["datasets"]["shifted"], "0123456789abcdef");
  EXPECT_EQ(j["config_hash"], "abc");
}
