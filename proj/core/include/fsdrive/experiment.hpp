// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end pipeline: datasets, codebook, staged training, evaluation,
// frame generation and the ablation suites. The CLI is a thin layer on top.

#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fsdrive/codec.hpp"
#include "fsdrive/config.hpp"
#include "fsdrive/curriculum.hpp"
#include "fsdrive/metrics.hpp"
#include "fsdrive/model.hpp"
#include "fsdrive/planner.hpp"
#include "fsdrive/world.hpp"

namespace fsd::experiment {

namespace fs = std::filesystem;

/// Progress lines on stderr.
void SetVerbose(bool on);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be
/// written to per-index slots so the outcome is independent of scheduling.
void ParallelFor(int n, int jobs, const std::function<void(int)>& fn);

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::vector<world::ScenarioEpisode> train;
  std::vector<world::ScenarioEpisode> val;
};

uint64_t EpisodeSeed(uint64_t data_seed, bool validation, int index);
Dataset GenerateDataset(const world::WorldConfig& world, int train_scenes, int val_scenes, uint64_t seed, int jobs);

struct DataPaths {
  fs::path dir;
  fs::path train() const { return dir / "train.jsonl"; }
  fs::path val() const { return dir / "val.jsonl"; }
  fs::path codebook() const { return dir / "codebook.fscb"; }
  fs::path vocab() const { return dir / "vocab.json"; }
  fs::path meta() const { return dir / "data.json"; }
};

void WriteEpisodes(const fs::path& path, const std::vector<world::ScenarioEpisode>& episodes);
std::vector<world::ScenarioEpisode> ReadEpisodes(const fs::path& path);

/// Distinct patches of every curriculum frame of `episodes`, in first-seen
/// order; equivalent to BuildCodebook over the concatenated frame list.
codec::Codebook CodebookFromEpisodes(const std::vector<world::ScenarioEpisode>& episodes,
                                     const raster::RasterConfig& raster, int capacity);

/// Loaded codec artifacts plus a tokenizer bound to them.
struct Codec {
  codec::Codebook codebook;
  codec::Vocab vocab;
  curriculum::Tokenizer tok;

  Codec(codec::Codebook cb, codec::Vocab v, const raster::RasterConfig& raster);
  Codec(const Codec&) = delete;
  Codec& operator=(const Codec&) = delete;
};

std::unique_ptr<Codec> LoadCodec(const DataPaths& paths, const raster::RasterConfig& raster);

/// Episode files plus a data.json recording the generating config.
void GenerateData(const ExperimentConfig& cfg, const DataPaths& paths, const RunManifest* manifest);
/// Codebook and vocab from the training episodes.
void BuildCodecFiles(const DataPaths& paths, const raster::RasterConfig& raster, int k, const RunManifest* manifest);
/// Creates whatever is missing under `paths.dir` and checks that existing
/// files match `cfg`.
void PrepareData(const ExperimentConfig& cfg, const DataPaths& paths, const RunManifest* manifest);
Dataset LoadDataset(const DataPaths& paths);

// ---------------------------------------------------------------------------
// Training

struct TrainRequest {
  curriculum::Stage stage = curriculum::Stage::kPretrain;
  std::optional<fs::path> init;  // stage-1 checkpoint for fine-tuning
  fs::path out;                  // checkpoint path
  fs::path shard_dir;            // materialized sequence shards
};

struct TrainSummary {
  fs::path checkpoint;
  std::string checkpoint_hash;
  std::vector<std::string> shard_hashes;
  double first_loss = 0.0;
  double final_loss = 0.0;  // mean over the last logging window
  int64_t steps = 0;
};

/// Model configuration with the vocabulary size of `codec`.
model::ModelConfig ModelFor(const ExperimentConfig& cfg, const Codec& codec);

TrainSummary Train(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec, const TrainRequest& req,
                   const RunManifest* manifest);

model::Checkpoint LoadCheckpoint(const fs::path& path);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  curriculum::CotVariant variant = curriculum::CotVariant::kSt;
  bool ego_status = false;
  bool teacher_forced_cot = false;
};

struct EvalOutput {
  metrics::MetricsReport report;
  std::vector<metrics::PlanEvalRow> rows;
  std::vector<planner::PlanResult> plans;
  std::vector<raster::Frame> cot_frames;  // generated image CoT, when present
  std::vector<raster::Frame> gt_frames;   // matching ground-truth unified frames
  int grammar_errors = 0;
};

EvalOutput Evaluate(const ExperimentConfig& cfg, const model::Params<float>& params, const Codec& codec,
                    const std::vector<world::ScenarioEpisode>& episodes, const EvalOptions& options);

/// Greedy exact-match answer accuracy over the evaluation samples.
double EvaluateVqa(const ExperimentConfig& cfg, const model::Params<float>& params, const Codec& codec,
                   const std::vector<world::ScenarioEpisode>& episodes);

struct GenerateOutput {
  std::vector<raster::Frame> generated;
  std::vector<raster::Frame> reference;
  double ffd = 0.0;
};

/// Future frames from the future or progressive task, scored against the
/// ground-truth future frames.
GenerateOutput GenerateFutures(const ExperimentConfig& cfg, const model::Params<float>& params, const Codec& codec,
                               const std::vector<world::ScenarioEpisode>& episodes, curriculum::Task task);

/// Bar chart of the L2 and collision triples of a report.
std::string ReportSvg(const metrics::MetricsReport& report);

// ---------------------------------------------------------------------------
// Ablation suites

enum class Suite { kPretrain, kCot, kProgressive };
Suite SuiteFromName(std::string_view name);

struct ArmResult {
  std::string name;
  fs::path checkpoint;
  fs::path report_path;
  metrics::MetricsReport report;
};

struct SuiteResult {
  std::vector<ArmResult> arms;
  std::string table;  // markdown comparison
};

/// Stage-1 checkpoint for `cfg`, trained unless an identical one exists.
fs::path EnsurePretrained(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec,
                          const RunManifest* manifest);
/// Stage-2 checkpoint from `init` (or from scratch when empty).
fs::path EnsureFinetuned(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec,
                         const std::optional<fs::path>& init, const RunManifest* manifest);

ArmResult EvaluateArm(const ExperimentConfig& cfg, const Dataset& data, const Codec& codec, const std::string& name,
                      const fs::path& checkpoint, const RunManifest* manifest);

SuiteResult RunSuite(Suite suite, const ExperimentConfig& cfg, const RunManifest* manifest);

// ---------------------------------------------------------------------------

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::vector<std::pair<std::string, double>> per_group;  // max error per tensor
};

/// Central finite differences on a tiny double-precision model.
GradcheckResult RunGradcheck(uint64_t seed = 7);

}  // namespace fsd::experiment
