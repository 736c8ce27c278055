// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "fsdrive/codec.hpp"
#include "fsdrive/curriculum.hpp"
#include "fsdrive/experiment.hpp"
#include "fsdrive/metrics.hpp"
#include "fsdrive/model.hpp"
#include "fsdrive/planner.hpp"
#include "fsdrive/world.hpp"

namespace {

using namespace fsd;

struct Env {
  experiment::ExperimentConfig cfg;
  experiment::Dataset data;
  std::unique_ptr<experiment::Codec> codec;
  model::Params<float> params;

  Env() : params(model::ZeroParams<float>(model::ModelConfig{})) {
    cfg.model.d_model = 64;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 4;
    data = experiment::GenerateDataset(cfg.world, 200, 20, 1, 1);
    auto cb = experiment::CodebookFromEpisodes(data.train, cfg.raster, codec::kDefaultCapacity);
    codec = std::make_unique<experiment::Codec>(std::move(cb), codec::Vocab(), cfg.raster);
    params = model::InitParams<float>(experiment::ModelFor(cfg, *codec), 1);
  }
};

Env& E() {
  static Env env;
  return env;
}

void BM_GenerateScene(benchmark::State& state) {
  const world::WorldConfig w;
  uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(world::GenerateScene(seed++, w));
}
BENCHMARK(BM_GenerateScene);

void BM_CheckCollision(benchmark::State& state) {
  const auto& ep = E().data.val[0];
  const auto traj = world::EgoFutureTrajectory(ep, 4);
  for (auto _ : state) benchmark::DoNotOptimize(world::CheckCollision(ep, traj, 4));
}
BENCHMARK(BM_CheckCollision);

void BM_RenderUnifiedFrame(benchmark::State& state) {
  const auto& ep = E().data.val[1];
  for (auto _ : state) benchmark::DoNotOptimize(curriculum::UnifiedCotFrame(ep, 5, E().cfg.raster));
}
BENCHMARK(BM_RenderUnifiedFrame);

void BM_EncodeDecodeFrame(benchmark::State& state) {
  const auto f = curriculum::FutureFrame(E().data.val[2], 5, E().cfg.raster);
  for (auto _ : state) {
    benchmark::DoNotOptimize(codec::DecodeTokens(codec::EncodeFrame(f, E().codec->codebook), E().codec->codebook));
  }
}
BENCHMARK(BM_EncodeDecodeFrame);

void BM_BuildPlanSequence(benchmark::State& state) {
  const auto& ep = E().data.train[3];
  for (auto _ : state) {
    benchmark::DoNotOptimize(curriculum::BuildPlanSeq(ep, 5, curriculum::CotVariant::kSt, false, E().codec->tok));
  }
}
BENCHMARK(BM_BuildPlanSequence);

model::Batch PlanBatch(int batch) {
  std::vector<std::vector<int>> toks;
  std::vector<std::vector<uint8_t>> flags;
  for (int b = 0; b < batch; ++b) {
    auto s = curriculum::BuildPlanSeq(E().data.train[static_cast<size_t>(b)], 5, curriculum::CotVariant::kSt, false,
                                      E().codec->tok);
    toks.push_back(s.tokens);
    flags.push_back(s.target);
  }
  return model::MakeBatch(toks, flags, E().codec->vocab.Token(codec::Special::kPad));
}

void BM_Forward(benchmark::State& state) {
  const auto batch = PlanBatch(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(model::BatchLoss(E().params, batch));
  state.SetItemsProcessed(state.iterations() * batch.batch * batch.len);
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto batch = PlanBatch(static_cast<int>(state.range(0)));
  auto params = E().params;
  auto opt = model::AdamState::For(params);
  model::Hyper h;
  for (auto _ : state) benchmark::DoNotOptimize(model::TrainStep(params, opt, batch, h));
  state.SetItemsProcessed(state.iterations() * batch.batch * batch.len);
}
BENCHMARK(BM_TrainStep)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_PlanGreedy(benchmark::State& state) {
  planner::PlanRequest req;
  req.episode = &E().data.val[4];
  req.t = 5;
  req.variant = static_cast<curriculum::CotVariant>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(planner::Plan(E().params, E().codec->tok, req));
}
BENCHMARK(BM_PlanGreedy)
    ->Arg(static_cast<int>(curriculum::CotVariant::kNone))
    ->Arg(static_cast<int>(curriculum::CotVariant::kSt))
    ->Unit(benchmark::kMillisecond);

void BM_Ffd(benchmark::State& state) {
  std::vector<raster::Frame> a, b;
  for (const auto& ep : E().data.train) {
    a.push_back(curriculum::FutureFrame(ep, 3, E().cfg.raster));
    b.push_back(curriculum::UnifiedCotFrame(ep, 3, E().cfg.raster));
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::Ffd(a, b, E().codec->codebook));
}
BENCHMARK(BM_Ffd)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
