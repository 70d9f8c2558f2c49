// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "tall/param_report.hpp"

using namespace tall;

// Figures below are typed in independently of the library's own table.

TEST(ParamReport, BloomzFigures) {
  const ParamReport r = param_report("bloomz");
  ASSERT_EQ(r.modules.size(), 9u);
  EXPECT_EQ(r.modules[2].total, 4'203'520u);
  EXPECT_EQ(r.modules[5].total, 1'577'472u);
  EXPECT_EQ(r.total(), 883'537'920u);
  EXPECT_EQ(r.llm_only(), 559'214'592u);
  EXPECT_EQ(r.trainable(), 126'786'048u);
  EXPECT_EQ(trainable_share(r), "14.35%");
  EXPECT_EQ(llm_share(r), "63.29%");
  EXPECT_EQ(format_percent(r.llm_only(), r.total(), 1), "63.3%");
  EXPECT_TRUE(check_param_report(r).empty());
}

TEST(ParamReport, QwenFigures) {
  const ParamReport r = param_report("qwen");
  EXPECT_EQ(r.modules[2].total, 3'448'704u);
  EXPECT_EQ(r.modules[5].total, 1'446'400u);
  EXPECT_EQ(r.total(), 799'239'680u);
  EXPECT_EQ(r.llm_only(), 494'032'768u);
  EXPECT_EQ(r.trainable(), 107'669'632u);
  EXPECT_EQ(trainable_share(r), "13.47%");
  EXPECT_EQ(format_percent(r.llm_only(), r.total(), 1), "61.8%");
  EXPECT_TRUE(check_param_report(r).empty());
}

TEST(ParamReport, LmHeadIsCountedOnce) {
  const ParamReport r = param_report("bloomz");
  std::size_t naive = 0;
  for (const auto& m : r.modules) naive += m.total;
  EXPECT_EQ(naive - r.total(), 33'709'568u);
}

TEST(ParamReport, CheckReportsDifferences) {
  ParamReport r = param_report("qwen");
  r.modules[3].total += 1;
  r.modules[3].trainable += 1;
  const auto diffs = check_param_report(r);
  EXPECT_GE(diffs.size(), 3u);
  EXPECT_NE(diffs.front().find("Custom Decoder 1"), std::string::npos);
  EXPECT_THROW(check_param_report(param_report("toy")), ConfigError);
}

TEST(ParamReport, ToyMatchesLiveStore) {
  const TallConfig cfg;
  ParamStore lr2hr, llm, hr2lr;
  Rng rng(1);
  init_translator(lr2hr, cfg.lr2hr, rng);
  init_llm(llm, cfg.llm, rng);
  init_translator(hr2lr, cfg.hr2lr, rng);
  const ParamStore s = build_tall_store(cfg, lr2hr, llm, hr2lr, rng);
  const ParamReport r = param_report("toy", cfg);
  EXPECT_EQ(r.trainable(), s.counts().trainable);
  EXPECT_EQ(r.total(), s.counts().total);
  EXPECT_EQ(r.llm_only(), s.counts("llm").total);
  EXPECT_EQ(r.modules[2].total, s.counts("adapter1").total);
  EXPECT_EQ(r.modules[3].total, s.counts("bridge1").total);
  EXPECT_EQ(r.modules[6].total, s.counts("bridge2").total);
}

TEST(Percent, HalfUpRounding) {
  EXPECT_EQ(format_percent(1, 8, 2), "12.50%");
  EXPECT_EQ(format_percent(1, 3, 2), "33.33%");
  EXPECT_EQ(format_percent(2, 3, 2), "66.67%");
  EXPECT_EQ(format_percent(1, 200, 0), "1%");    // 0.5 rounds up
  EXPECT_EQ(format_percent(1, 20000, 2), "0.01%");
  EXPECT_EQ(format_percent(0, 5, 1), "0.0%");
  EXPECT_EQ(format_percent(5, 5, 2), "100.00%");
  EXPECT_THROW(format_percent(1, 0, 2), ContractError);
}

TEST(Percent, Commas) {
  EXPECT_EQ(with_commas(0), "0");
  EXPECT_EQ(with_commas(999), "999");
  EXPECT_EQ(with_commas(1000), "1,000");
  EXPECT_EQ(with_commas(883'537'920), "883,537,920");
}

TEST(ParamReport, UnknownPreset) { EXPECT_THROW(param_report("llama"), ConfigError); }

TEST(ParamReport, TextMentionsTotals) {
  const std::string text = format_param_report(param_report("bloomz"));
  EXPECT_NE(text.find("883,537,920"), std::string::npos);
  EXPECT_NE(text.find("126,786,048 (14.35%)"), std::string::npos);
  EXPECT_NE(text.find("559,214,592 (63.29%)"), std::string::npos);
}
