// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Full-size translator pretraining with the default configuration. Slow.

#include <gtest/gtest.h>

#include "tall/experiment.hpp"

using namespace tall;

namespace {

void expect_quality(Direction dir) {
  const RunConfig cfg;
  ASSERT_EQ(cfg.world.translator_pairs, 20000u);
  ASSERT_EQ(cfg.train.translator.epochs, 5u);
  const World world = build_world(cfg);
  const ParamStore store = pretrain_translator(cfg, world, dir);
  const double em = translator_exact_match(store, cfg.translator(), world.translator_heldout, dir);
  EXPECT_GE(em, 0.95) << direction_name(dir);
}

}  // namespace

TEST(TranslatorQuality, Lr2hrHeldOutExactMatch) { expect_quality(Direction::lr2hr); }

TEST(TranslatorQuality, Hr2lrHeldOutExactMatch) { expect_quality(Direction::hr2lr); }
