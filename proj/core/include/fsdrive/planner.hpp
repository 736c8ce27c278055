// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Two-phase inference: imagine the chain-of-thought span, then decode
// waypoints conditioned on it, all in one causal context.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fsdrive/curriculum.hpp"
#include "fsdrive/model.hpp"
#include "fsdrive/raster.hpp"
#include "fsdrive/world.hpp"

namespace fsd::planner {

inline constexpr int kMaxTextCot = 200;

struct PlanRequest {
  const world::ScenarioEpisode* episode = nullptr;
  int t = curriculum::kFirstT;
  std::optional<world::Command> command;  // defaults to the navigation command
  bool ego_status = false;
  curriculum::CotVariant variant = curriculum::CotVariant::kSt;
  model::DecodeMode mode = model::DecodeMode::kGreedy;
  uint64_t seed = 0;
  bool teacher_forced_cot = false;  // inject the ground-truth CoT span
};

struct PlanResult {
  int t = 0;
  curriculum::CotVariant variant = curriculum::CotVariant::kSt;
  std::vector<int> cot_tokens;             // image part of the CoT span
  std::optional<raster::Frame> cot_frame;  // decoded image part
  std::string cot_text;                    // text part of the CoT span
  world::Trajectory trajectory;
  std::vector<int> waypoint_tokens;
  std::vector<int> transcript;  // every token of the context, prompt included
  bool clamped = false;         // a decoded waypoint sits on a range edge

  std::string ToJson(const std::string& cot_ppm_path = "") const;
};

/// Raises a compatibility error unless the checkpoint was trained with this
/// codec.
void CheckCompatibility(const model::CheckpointMeta& meta, const codec::Codebook& codebook, const codec::Vocab& vocab);

/// IMG-range slot restricted to ids the codebook actually holds.
codec::TokenRange ImageRange(const curriculum::Tokenizer& tok);

PlanResult Plan(const model::Params<float>& params, const curriculum::Tokenizer& tok, const PlanRequest& req);

/// Element-wise equivalent of sequential Plan calls; every request must use
/// the same CoT variant.
std::vector<PlanResult> PlanBatch(const model::Params<float>& params, const curriculum::Tokenizer& tok,
                                  const std::vector<PlanRequest>& requests);

// ---------------------------------------------------------------------------
// Frame generation for the future and progressive tasks

struct GeneratedFrames {
  std::optional<raster::Frame> lane;
  std::optional<raster::Frame> boxes;
  raster::Frame future;
};

GeneratedFrames GenerateFrames(const model::Params<float>& params, const curriculum::Tokenizer& tok,
                               const world::ScenarioEpisode& ep, int t, curriculum::Task task,
                               const model::SampleOptions& options);

}  // namespace fsd::planner
