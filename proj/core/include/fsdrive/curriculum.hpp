// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Task-tagged training sequences, loss masks, stage mixtures, and packed
// sequence shards.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fsdrive/codec.hpp"
#include "fsdrive/model.hpp"
#include "fsdrive/raster.hpp"
#include "fsdrive/rng.hpp"
#include "fsdrive/world.hpp"

namespace fsd::curriculum {

enum class Task : uint8_t { kVqa, kFuture, kLane, kBox, kProgressive, kPlan };
inline constexpr int kNumTasks = 6;

const char* TaskName(Task task);
Task TaskFromName(std::string_view name);

enum class CotVariant { kNone, kText, kImgText, kSt };

const char* CotVariantName(CotVariant v);  // "none", "text", "imgtxt", "st"
CotVariant CotVariantFromName(std::string_view name);

enum class Role { kPrompt, kObs, kQuestion, kAnswer, kLane, kBox, kFuture, kCot, kCmd, kEgo, kWaypoints, kSep, kEos };

struct Span {
  Role role;
  int begin = 0;
  int end = 0;  // exclusive
  int size() const { return end - begin; }
};

/// One training sequence. `target[i]` marks tokens[i] as a prediction
/// target; MakeBatch shifts it onto the predicting position.
struct Sequence {
  Task task = Task::kVqa;
  std::vector<int> tokens;
  std::vector<uint8_t> target;
  std::vector<Span> spans;

  int TargetCount() const;
  const Span* Find(Role role) const;  // first span with `role`, or null
};

/// Everything needed to turn world states into tokens.
struct Tokenizer {
  const codec::Codebook& codebook;
  const codec::Vocab& vocab;
  codec::QuantSpec quant{};
  raster::RasterConfig raster{};
};

/// First and last valid sample times: one observation step of history and
/// a full planning horizon of future are required.
inline constexpr int kFirstT = 1;
inline constexpr int kLastT = world::kNumStates - 1 - world::kHorizon;

// Frames used by the tasks. Observations are anchored at their own ego
// pose; future, priors and the unified frame are anchored at the ego at t.
std::array<raster::Frame, 2> ObservationFrames(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg);
raster::Frame FutureFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg);
raster::Frame LanePriorFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg);
raster::Frame BoxPriorFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg);
raster::Frame UnifiedCotFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg);

// ---------------------------------------------------------------------------
// Question answering

enum class Question { kAgentsAhead, kNearestDistance, kLeftLane, kRightLane, kEgoSpeed, kCommand };
inline constexpr int kNumQuestions = 6;

struct QaPair {
  Question kind;
  std::string question;
  std::string answer;
};

std::string QuestionText(Question q);
/// Ground-truth answer for `q` at time t.
std::string AnswerQuestion(const world::ScenarioEpisode& ep, int t, Question q);
/// Five-metre bin label, e.g. 12.3 -> "10-15".
std::string DistanceBin(double meters);
QaPair SynthQa(const world::ScenarioEpisode& ep, int t, uint64_t seed);

/// Textual future-perception string used by the text chain of thought.
std::string PerceptionText(const world::ScenarioEpisode& ep, int t);

// ---------------------------------------------------------------------------
// Sequence builders

Sequence BuildVqaSeq(const world::ScenarioEpisode& ep, int t, const QaPair& qa, const Tokenizer& tok);
Sequence BuildFutureSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok);
Sequence BuildLaneSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok);
Sequence BuildBoxSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok);
Sequence BuildProgressiveSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok);
Sequence BuildPlanSeq(const world::ScenarioEpisode& ep, int t, CotVariant variant, bool ego_status, const Tokenizer& tok);

/// Tokens of BOS TASK_PLAN OBS SEP (the prompt shared by every variant).
std::vector<int> PlanPromptPrefix(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok);
/// SEP CMD [EGO_ON v a | EGO_OFF] SEP, the bridge between CoT and waypoints.
std::vector<int> PlanBridge(const world::ScenarioEpisode& ep, int t, world::Command command, bool ego_status,
                            const Tokenizer& tok);
/// Tokens of the variant span given the CoT content (marker first).
std::vector<int> CotSpan(const world::ScenarioEpisode& ep, int t, CotVariant variant, const Tokenizer& tok);

// ---------------------------------------------------------------------------
// Mixtures

enum class Stage { kPretrain = 1, kFinetune = 2 };

struct MixtureConfig {
  std::array<double, kNumTasks> stage1 = {0.2, 0.3, 0.15, 0.15, 0.2, 0.0};
  std::array<double, kNumTasks> stage2 = {0.2, 0.0, 0.0, 0.0, 0.0, 0.8};
  std::array<bool, kNumTasks> enabled = {true, true, true, true, true, true};
  CotVariant cot_variant = CotVariant::kSt;
  bool ego_status = false;
  bool future_aux = false;  // keep future-frame generation during stage 2
  double future_aux_weight = 0.2;

  /// Normalized sampling weights for `stage`; config error when none remain.
  std::array<double, kNumTasks> Weights(Stage stage) const;
  std::string ToJson() const;
  static MixtureConfig FromJson(std::string_view text);
};

struct SampleRef {
  Task task;
  int episode;
  int t;
  uint64_t qa_seed;
};

/// Seeded, single-consumer stream of training sequences.
class MixtureStream {
 public:
  MixtureStream(Stage stage, const MixtureConfig& cfg, const std::vector<world::ScenarioEpisode>& episodes,
                const Tokenizer& tok, uint64_t seed);

  SampleRef NextRef();
  Sequence Next();
  std::vector<Sequence> NextBatch(int batch_size);

 private:
  Stage stage_;
  MixtureConfig cfg_;
  std::array<double, kNumTasks> weights_;
  const std::vector<world::ScenarioEpisode>& episodes_;
  const Tokenizer& tok_;
  Rng rng_;
};

Sequence BuildSequence(const SampleRef& ref, const world::ScenarioEpisode& ep, const MixtureConfig& cfg,
                       const Tokenizer& tok);

model::Batch ToBatch(const std::vector<Sequence>& seqs, const codec::Vocab& vocab);

// ---------------------------------------------------------------------------
// Packed shards ("FSSQ")

struct PackedRecord {
  Task task;
  std::vector<int> tokens;
  std::vector<uint8_t> target;
};

std::string SerializeShard(const std::vector<PackedRecord>& records);
std::vector<PackedRecord> DeserializeShard(std::string_view bytes);

}  // namespace fsd::curriculum
