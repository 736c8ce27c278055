// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/config.hpp"

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "fsdrive/error.hpp"

namespace fsd::experiment {
namespace {

ErrorKind KindOf(const std::function<void()>& fn, std::string* message = nullptr) {
  try {
    fn();
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kUsage;
}

TEST(Config, TextRoundTrip) {
  ExperimentConfig c;
  c.Set("model.d_model=64");
  c.Set("world.ego_accel_choices=[-1.0, 0, 1.5]");
  c.Set("plan.cot_variant=\"text\"");
  const auto back = ExperimentConfig::Parse(c.ToText());
  EXPECT_EQ(back.ToText(), c.ToText());
  EXPECT_EQ(back.Hash(), c.Hash());
  EXPECT_EQ(back.model.d_model, 64);
  EXPECT_EQ(back.world.ego_accel_choices, (std::vector<double>{-1.0, 0.0, 1.5}));
  EXPECT_EQ(back.mixture.cot_variant, curriculum::CotVariant::kText);
}

TEST(Config, ParsesSectionsCommentsAndLists) {
  const auto c = ExperimentConfig::Parse(
      "# experiment\n"
      "[data]\ntrain_scenes = 12   # small\nval_scenes = 6\n\n"
      "[eval]\nepisodes = 4\ntimes = [1, 3]\nvqa = false\n"
      "[run]\nout_dir = \"runs/#1\"\n");
  EXPECT_EQ(c.train_scenes, 12);
  EXPECT_EQ(c.eval_times, (std::vector<int>{1, 3}));
  EXPECT_FALSE(c.eval_vqa);
  EXPECT_EQ(c.out_dir, "runs/#1");
}

TEST(Config, OverridesChangeHash) {
  ExperimentConfig a, b;
  b.Set("seeds.train=2");
  EXPECT_NE(a.Hash(), b.Hash());
  b.Set("seeds.train = 1");
  EXPECT_EQ(a.Hash(), b.Hash());
}

TEST(Config, BareWordStringsMatchQuotedOnes) {
  ExperimentConfig a, b;
  a.Set("run.out_dir=\"runs/a\"");
  b.Set("run.out_dir=runs/a");
  EXPECT_EQ(b.out_dir, "runs/a");
  EXPECT_EQ(a.Hash(), b.Hash());
  EXPECT_EQ(KindOf([&] { b.Set("run.out_dir=two words"); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { b.Set("run.out_dir=\"open"); }), ErrorKind::kConfig);
}

TEST(Config, ErrorsNameTheKey) {
  std::string msg;
  ExperimentConfig c;
  EXPECT_EQ(KindOf([&] { c.Set("model.width=3"); }, &msg), ErrorKind::kConfig);
  EXPECT_NE(msg.find("model.width"), std::string::npos);
  EXPECT_EQ(KindOf([&] { c.Set("stage1.steps=many"); }, &msg), ErrorKind::kConfig);
  EXPECT_NE(msg.find("stage1.steps"), std::string::npos);
  EXPECT_EQ(KindOf([&] { c.Set("eval.vqa=yes"); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([&] { c.Set("no_equals_sign"); }), ErrorKind::kConfig);
  EXPECT_EQ(KindOf([] { ExperimentConfig::Parse("[data\n"); }, &msg), ErrorKind::kConfig);
  EXPECT_NE(msg.find("line 1"), std::string::npos);
}

TEST(Config, ValidateChecksCrossFieldLimits) {
  ExperimentConfig c;
  c.Validate();
  c.eval_episodes = c.val_scenes + 1;
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
  c = {};
  c.eval_times = {11};
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
  c = {};
  c.model.n_heads = 5;
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);  c = {};
  c.Set("eval.episodes=3");
  c.Set("data.val_scenes=5");
  c.Validate();
}

TEST(RunManifest, AppendOnlyWithSequenceNumbers) {
  const auto path = std::filesystem::temp_directory_path() / "fsd_manifest_test" / "manifest.jsonl";
  std::filesystem::remove_all(path.parent_path());
  RunManifest m(path);
  m.Append("first", R"({"a":1})");
  const auto before = m.Lines();
  m.Append("second", R"({"b":"x"})");
  const auto after = m.Lines();
  ASSERT_EQ(before.size(), 1u);
  ASSERT_EQ(after.size(), 2u);
  EXPECT_EQ(after[0], before[0]);
  const auto j = nlohmann::json::parse(after[1]);
  EXPECT_EQ(j["seq"], 1);
  EXPECT_EQ(j["command"], "second");
  EXPECT_EQ(j["tool_version"], kToolVersion);
  EXPECT_EQ(j["b"], "x");
  std::filesystem::remove_all(path.parent_path());
}

}  // namespace
}  // namespace fsd::experiment
