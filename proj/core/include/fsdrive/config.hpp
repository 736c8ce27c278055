// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration in a sectioned key = value text format, and the
// append-only run manifest.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fsdrive/curriculum.hpp"
#include "fsdrive/model.hpp"
#include "fsdrive/raster.hpp"
#include "fsdrive/world.hpp"

namespace fsd::experiment {

struct TrainSpec {
  int64_t steps = 0;
  int batch_size = 16;
  model::Hyper hyper;
  int log_every = 100;
};

struct ExperimentConfig {
  // [data]
  int train_scenes = 2000;
  int val_scenes = 200;
  // [seeds]
  uint64_t data_seed = 1;
  uint64_t train_seed = 1;   // parameter init and sequence sampling
  uint64_t sample_seed = 0;  // top-k decoding
  world::WorldConfig world;
  raster::RasterConfig raster;
  int codebook_k = codec::kDefaultCapacity;
  model::ModelConfig model;
  curriculum::MixtureConfig mixture;
  TrainSpec stage1;
  TrainSpec stage2;
  // [eval]
  int eval_episodes = 200;
  std::vector<int> eval_times = {2, 5, 8};
  bool eval_vqa = true;
  // [run]
  std::string out_dir = "runs/default";
  int jobs = 1;

  ExperimentConfig();

  static ExperimentConfig Parse(std::string_view text);
  static ExperimentConfig Load(const std::filesystem::path& path);
  /// Applies one "section.key=value" override. Cross-field limits are left to
  /// Validate so overrides can be applied in any order.
  void Set(std::string_view assignment);
  /// Canonical text; Parse(ToText()) reproduces the config.
  std::string ToText() const;
  std::string Hash() const;
  void Validate() const;
};

/// Append-only JSON-lines provenance log.
class RunManifest {
 public:
  explicit RunManifest(std::filesystem::path path) : path_(std::move(path)) {}

  /// Appends one event; `fields` is a JSON object text.
  void Append(std::string_view command, std::string_view fields_json) const;
  std::vector<std::string> Lines() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace fsd::experiment
