// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/experiment.hpp"

#include <gtest/gtest.h>

#include <atomic>

#include "fsdrive/error.hpp"
#include "fsdrive/hash.hpp"
#include "fsdrive/io.hpp"

namespace fsd::experiment {
namespace {

ExperimentConfig TinyConfig(const fs::path& out) {
  ExperimentConfig c;
  c.train_scenes = 12;
  c.val_scenes = 4;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.stage1.steps = 3;
  c.stage1.batch_size = 2;
  c.stage2.steps = 3;
  c.stage2.batch_size = 2;
  c.eval_episodes = 2;
  c.eval_times = {2, 6};
  c.out_dir = out.string();
  c.Validate();
  return c;
}

class ExperimentTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("fsd_experiment_" + std::string(
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    cfg_ = TinyConfig(dir_);
    paths_ = {dir_ / "data"};
    PrepareData(cfg_, paths_, nullptr);
    data_ = LoadDataset(paths_);
    codec_ = LoadCodec(paths_, cfg_.raster);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
  ExperimentConfig cfg_;
  DataPaths paths_;
  Dataset data_;
  std::unique_ptr<Codec> codec_;
};

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hits(50, 0);
  ParallelFor(50, 3, [&](int i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(ParallelFor(10, 3, [](int i) {
                 if (i == 7) Fail(ErrorKind::kState, "boom");
               }),
               Error);
}

TEST(Dataset, SplitsUseDistinctSeedsAndJobsDoNotMatter) {
  EXPECT_NE(EpisodeSeed(1, false, 0), EpisodeSeed(1, true, 0));
  EXPECT_NE(EpisodeSeed(1, false, 0), EpisodeSeed(1, false, 1));
  const world::WorldConfig w;
  const auto a = GenerateDataset(w, 6, 3, 5, 1);
  const auto b = GenerateDataset(w, 6, 3, 5, 4);
  ASSERT_EQ(a.train.size(), 6u);
  for (size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(world::EpisodeToJsonLine(a.train[i]), world::EpisodeToJsonLine(b.train[i]));
  }
}

TEST(Dataset, CodebookMatchesBatchBuild) {
  const ExperimentConfig c;
  const auto d = GenerateDataset(c.world, 5, 0, 3, 1);
  std::vector<raster::Frame> frames;
  for (const auto& ep : d.train) {
    for (int t = curriculum::kFirstT; t <= curriculum::kLastT; ++t) {
      for (const auto& f : curriculum::ObservationFrames(ep, t, c.raster)) frames.push_back(f);
      frames.push_back(curriculum::FutureFrame(ep, t, c.raster));
      frames.push_back(curriculum::LanePriorFrame(ep, t, c.raster));
      frames.push_back(curriculum::BoxPriorFrame(ep, t, c.raster));
      frames.push_back(curriculum::UnifiedCotFrame(ep, t, c.raster));
    }
  }
  EXPECT_EQ(CodebookFromEpisodes(d.train, c.raster, 512).Hash(), codec::BuildCodebook(frames, 512).Hash());
}

TEST_F(ExperimentTest, EpisodeFilesRoundTrip) {
  ASSERT_EQ(data_.train.size(), 12u);
  ASSERT_EQ(data_.val.size(), 4u);
  const auto regenerated = GenerateDataset(cfg_.world, 12, 4, cfg_.data_seed, 1);
  EXPECT_EQ(world::EpisodeToJsonLine(regenerated.val[3]), world::EpisodeToJsonLine(data_.val[3]));
}

TEST_F(ExperimentTest, DataDirectoryRejectsOtherConfig) {
  ExperimentConfig other = cfg_;
  other.data_seed = 9;
  try {
    PrepareData(other, paths_, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
  other = cfg_;
  other.codebook_k = 256;
  EXPECT_THROW(PrepareData(other, paths_, nullptr), Error);
  PrepareData(cfg_, paths_, nullptr);  // identical config is accepted
}

TEST_F(ExperimentTest, TrainingIsDeterministicAndRecordsProvenance) {
  RunManifest m(dir_ / "manifest.jsonl");
  TrainRequest req;
  req.stage = curriculum::Stage::kPretrain;
  req.out = dir_ / "a.fsdk";
  req.shard_dir = dir_ / "shards";
  const auto a = Train(cfg_, data_, *codec_, req, &m);
  req.out = dir_ / "b.fsdk";
  const auto b = Train(cfg_, data_, *codec_, req, &m);
  EXPECT_EQ(a.checkpoint_hash, HashBytes(io::ReadFile(dir_ / "a.fsdk")));
  EXPECT_EQ(a.shard_hashes, b.shard_hashes);
  EXPECT_EQ(io::ReadFile(dir_ / "shards" / "a-00000.fssq"), io::ReadFile(dir_ / "shards" / "b-00000.fssq"));
  EXPECT_EQ(a.final_loss, b.final_loss);
  const auto ck = LoadCheckpoint(dir_ / "a.fsdk");
  planner::CheckCompatibility(ck.meta, codec_->codebook, codec_->vocab);
  EXPECT_EQ(ck.meta.stage, "pretrain");
  EXPECT_EQ(ck.meta.step, 3);
  EXPECT_EQ(m.Lines().size(), 2u);

  ExperimentConfig c2 = cfg_;
  c2.model.d_model = 32;
  TrainRequest ft;
  ft.stage = curriculum::Stage::kFinetune;
  ft.init = dir_ / "a.fsdk";
  ft.out = dir_ / "c.fsdk";
  ft.shard_dir = dir_ / "shards";
  try {
    Train(c2, data_, *codec_, ft, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCompatibility);
  }
}

TEST_F(ExperimentTest, EvaluationCoversEverySample) {
  const auto params = model::InitParams<float>(ModelFor(cfg_, *codec_), 3);
  EvalOptions o;
  const auto out = Evaluate(cfg_, params, *codec_, data_.val, o);
  EXPECT_EQ(out.rows.size(), 4u);
  EXPECT_EQ(out.report.n_samples, 4);
  EXPECT_EQ(out.grammar_errors, 0);
  EXPECT_EQ(out.cot_frames.size(), 4u);
  o.variant = curriculum::CotVariant::kNone;
  const auto none = Evaluate(cfg_, params, *codec_, data_.val, o);
  EXPECT_TRUE(none.cot_frames.empty());
  EXPECT_FALSE(none.report.ffd.has_value());
  const double acc = EvaluateVqa(cfg_, params, *codec_, data_.val);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_NE(ReportSvg(out.report).find("<svg"), std::string::npos);
}

TEST_F(ExperimentTest, CheckpointsAreReusedByConfig) {
  const auto p1 = EnsurePretrained(cfg_, data_, *codec_, nullptr);
  const auto stamp = fs::last_write_time(p1);
  EXPECT_EQ(EnsurePretrained(cfg_, data_, *codec_, nullptr), p1);
  EXPECT_EQ(fs::last_write_time(p1), stamp);
  // Stage-2 and evaluation settings do not change the stage-1 key.
  ExperimentConfig c = cfg_;
  c.mixture.cot_variant = curriculum::CotVariant::kText;
  c.stage2.steps = 5;
  c.eval_episodes = 1;
  EXPECT_EQ(EnsurePretrained(c, data_, *codec_, nullptr), p1);
  c.train_seed = 2;
  EXPECT_NE(EnsurePretrained(c, data_, *codec_, nullptr), p1);
  const auto f1 = EnsureFinetuned(cfg_, data_, *codec_, p1, nullptr);
  const auto f0 = EnsureFinetuned(cfg_, data_, *codec_, std::nullopt, nullptr);
  EXPECT_NE(f1, f0);
}

TEST(Gradcheck, TinyModelWithinTolerance) {
  const auto r = RunGradcheck();
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor;
  EXPECT_FALSE(r.per_group.empty());
}

}  // namespace
}  // namespace fsd::experiment
