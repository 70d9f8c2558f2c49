// Copyright 2026 The tall Authors
// SPDX-License-Identifier: Apache-2.0

// Drives the tall executable end to end on a tiny configuration.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(TALL_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {};
  Result r;
  std::array<char, 4096> buf;
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

const char* kTinyConfig = R"({
  "world": {"grammar": {"vocab_words": 24}, "translator_pairs": 200, "translator_heldout": 20,
            "llm_sentences": 200, "llm_heldout": 20, "task_sentences": 100, "task_heldout": 20,
            "eval_sentences": 40},
  "models": {"translator": {"d_model": 16, "n_heads": 2, "d_ff": 32, "encoder_layers": 1, "decoder_layers": 1},
             "llm": {"d_model": 24, "n_heads": 2, "d_ff": 48, "n_layers": 1},
             "adapter1": {"d_in": 16, "d_hidden": 32, "d_out": 24},
             "bridge1": {"n_layers": 1, "d_model": 24, "n_heads": 2, "d_ff": 48, "d_cross": 24},
             "adapter2": {"d_in": 24, "d_hidden": 32, "d_out": 16},
             "bridge2": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32},
             "soft_prompt_len": 4},
  "train": {"translator": {"epochs": 1}, "llm": {"epochs": 1},
            "tall": {"max_steps": 6, "eval_every": 2, "batch_size": 8},
            "soft_prompt": {"max_steps": 3, "batch_size": 8}, "finetune": {"max_steps": 2},
            "scratch": {"epochs": 1}}
})";

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "tall_cli_test"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    std::ofstream(root() / "tiny.json") << kTinyConfig;
  }
  static void TearDownTestSuite() { fs::remove_all(root()); }

  static std::string base(const std::string& dir) {
    return "--config " + (root() / "tiny.json").string() + " --out-dir " + (root() / dir).string();
  }

  static void pretrain_all(const std::string& dir) {
    for (const char* m : {"translator-lr2hr", "translator-hr2lr", "llm"}) {
      const Result r = run(std::string("pretrain ") + m + " " + base(dir));
      ASSERT_EQ(r.code, 0) << r.output;
    }
  }
};

}  // namespace

TEST_F(Cli, ParamReportChecksPass) {
  for (const char* preset : {"bloomz", "qwen"}) {
    const Result r = run(std::string("param-report --preset ") + preset + " --check");
    EXPECT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("check: ok"), std::string::npos);
  }
  const Result toy = run("param-report --preset toy --check --config " + (root() / "tiny.json").string());
  EXPECT_EQ(toy.code, 0) << toy.output;
  const Result j = run("param-report --preset qwen --json");
  ASSERT_EQ(j.code, 0);
  EXPECT_EQ(nlohmann::json::parse(j.output)["trainable"], 107'669'632);
}

TEST_F(Cli, ConfigErrorsExitWithTwo) {
  std::ofstream(root() / "bad.json") << R"({"world": {"bogus": 1}})";
  const Result r = run("param-report --preset toy --config " + (root() / "bad.json").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("world.bogus"), std::string::npos) << r.output;
  EXPECT_EQ(run("param-report --preset nope").code, 2);
}

TEST_F(Cli, MissingBackboneNamesTheStage) {
  const Result r = run("train-tall " + base("empty"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("stage 1"), std::string::npos) << r.output;
  const Result dry = run("train-tall --dry-run " + base("empty"));
  EXPECT_EQ(dry.code, 0) << dry.output;
  EXPECT_NE(dry.output.find("stage 7"), std::string::npos) << dry.output;
  EXPECT_EQ(run("eval --approach direct " + base("empty")).code, 3);
}

TEST_F(Cli, PretrainingIsByteDeterministic) {
  pretrain_all("a");
  pretrain_all("b");
  for (const char* f : {"translator-lr2hr.tlcp", "translator-hr2lr.tlcp", "llm.tlcp"}) {
    const std::string x = slurp(root() / "a" / f);
    ASSERT_FALSE(x.empty()) << f;
    EXPECT_TRUE(x == slurp(root() / "b" / f)) << f;
  }
  const std::string metrics = slurp(root() / "a" / "llm.tlcp.metrics.jsonl");
  const auto first = nlohmann::json::parse(metrics.substr(0, metrics.find('\n')));
  EXPECT_TRUE(first.contains("config_hash"));
  EXPECT_TRUE(first.contains("step"));
}

TEST_F(Cli, ResumedTrainingMatchesAnUninterruptedRun) {
  pretrain_all("r");
  ASSERT_EQ(run("train-tall " + base("r") + " --out " + (root() / "r" / "full.tlcp").string()).code, 0);
  const std::string part = (root() / "r" / "part.tlcp").string();
  const Result stop = run("train-tall " + base("r") + " --out " + part + " --stop-at 4");
  ASSERT_EQ(stop.code, 0) << stop.output;
  const Result resume = run("train-tall " + base("r") + " --out " + part + " --resume " + part + ".state");
  ASSERT_EQ(resume.code, 0) << resume.output;
  EXPECT_TRUE(slurp(root() / "r" / "full.tlcp") == slurp(part));
}

TEST_F(Cli, EvaluatesEveryApproach) {
  pretrain_all("e");
  ASSERT_EQ(run("train-tall " + base("e")).code, 0);
  for (const char* b : {"soft-prompt", "finetune", "scratch"}) {
    const Result r = run(std::string("train-baseline ") + b + " " + base("e"));
    ASSERT_EQ(r.code, 0) << b << "\n" << r.output;
  }
  const std::string json = (root() / "e" / "results.json").string();
  const Result r = run("eval --all --dataset all " + base("e") + " --json " + json);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("# config "), std::string::npos);
  const auto table = nlohmann::json::parse(slurp(json));
  ASSERT_EQ(table["rows"].size(), 12u);
  for (const auto& row : table["rows"]) EXPECT_EQ(row["total"], 40);
  EXPECT_EQ(table["datasets"].size(), 2u);

  const Result again = run("eval --all --dataset all " + base("e"));
  EXPECT_EQ(again.output, r.output);
}
