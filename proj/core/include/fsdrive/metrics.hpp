// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Planning metrics under both aggregation conventions, the feature-Frechet
// distance between frame sets, and VQA exact-match accuracy.

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsdrive/codec.hpp"
#include "fsdrive/raster.hpp"
#include "fsdrive/world.hpp"

namespace fsd::metrics {

/// Values at 1 s, 2 s, 3 s and their mean.
struct Triple {
  double at1s = 0.0, at2s = 0.0, at3s = 0.0, avg = 0.0;
};

/// Fills `avg` with the mean of the three horizon values.
Triple MakeTriple(double at1s, double at2s, double at3s);

// Per-waypoint distances (6 entries) aggregated per convention:
// per-timestep reads the distance at waypoint 2k; cumulative averages
// waypoints 1..2k.
Triple PerTimestep(std::span<const double> per_waypoint);
Triple Cumulative(std::span<const double> per_waypoint);

std::array<double, world::kHorizon> WaypointDistances(const world::Trajectory& pred, const world::Trajectory& gt);
Triple L2UniAd(const world::Trajectory& pred, const world::Trajectory& gt);
Triple L2Stp3(const world::Trajectory& pred, const world::Trajectory& gt);

struct CollisionRates {
  Triple uniad;  // percentages
  Triple stp3;
};

CollisionRates Collisions(std::span<const world::CollisionReport> reports);

// ---------------------------------------------------------------------------
// Feature-Frechet distance

struct GaussStats {
  int dim = 0;
  std::vector<double> mean;
  std::vector<double> cov;  // dim x dim, row-major, symmetric
};

inline constexpr int kFeatureDim = 32;
inline constexpr int kMinSetSize = kFeatureDim + 1;
inline constexpr double kShrinkage = 1e-3;
inline constexpr uint64_t kProjectionSeed = 0x46464450524f4aULL;

/// Mean and unbiased covariance; sets smaller than kMinSetSize get
/// kShrinkage * I added.
GaussStats FitGaussian(const std::vector<std::vector<double>>& features);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
double FrechetDistance(const GaussStats& a, const GaussStats& b);

/// Histogram of codebook ids (L1-normalized over the codebook capacity)
/// through a fixed seeded random projection.
class FrameFeatures {
 public:
  explicit FrameFeatures(int capacity = codec::kDefaultCapacity, int dim = kFeatureDim,
                         uint64_t seed = kProjectionSeed);
  std::vector<double> Of(const codec::TokenGrid& grid) const;
  std::vector<double> Of(const raster::Frame& frame, const codec::Codebook& codebook) const;

 private:
  int capacity_, dim_;
  std::vector<double> projection_;  // capacity x dim
};

double Ffd(std::span<const raster::Frame> a, std::span<const raster::Frame> b, const codec::Codebook& codebook);

// ---------------------------------------------------------------------------

double VqaAccuracy(std::span<const std::string> predictions, std::span<const std::string> references);

/// Per-sample evaluation record.
struct PlanEvalRow {
  std::array<double, world::kHorizon> distances{};
  world::CollisionReport collision;
  bool clamped = false;
};

struct MetricsReport {
  Triple l2_uniad, l2_stp3;
  CollisionRates collision;
  std::optional<double> ffd;
  std::optional<double> vqa_acc;
  int n_samples = 0;
  int n_clamped = 0;
  std::string config_hash;
  std::string variant;

  std::string ToJson() const;
};

MetricsReport Aggregate(std::span<const PlanEvalRow> rows);

}  // namespace fsd::metrics
