// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Palette-indexed top-down rasterization in an ego-centric window.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fsdrive/world.hpp"

namespace fsd::raster {

inline constexpr int kWidth = 48;
inline constexpr int kHeight = 32;
inline constexpr int kNumPixels = kWidth * kHeight;
inline constexpr int kNumPaletteIds = 8;

enum PaletteId : uint8_t {
  kOffRoad = 0,
  kRoad = 1,
  kMarking = 2,
  kAgentBody = 3,
  kEgo = 4,
  kPriorLane = 5,
  kPriorBox = 6,
  kReserved = 7,
};

struct Rgb {
  uint8_t r, g, b;
  friend bool operator==(Rgb, Rgb) = default;
};

const std::array<Rgb, kNumPaletteIds>& Palette();

struct Frame {
  int width = kWidth;
  int height = kHeight;
  std::vector<uint8_t> pixels = std::vector<uint8_t>(kNumPixels, kOffRoad);  // row-major

  uint8_t At(int row, int col) const { return pixels[row * width + col]; }
  uint8_t& At(int row, int col) { return pixels[row * width + col]; }
  friend bool operator==(const Frame&, const Frame&) = default;
};

// Window of `lateral_extent` x `forward_extent` meters around the anchor;
// `behind` meters of it lie behind the anchor position. Row 0 is farthest.
struct RasterConfig {
  double lateral_extent = 12.0;
  double forward_extent = 48.0;
  double behind = 8.0;
  double meters_per_px_lateral = 0.25;
  double meters_per_px_forward = 1.5;

  void Validate() const;
  /// Cell-center position in the anchor's ego frame.
  Vec2 CellCenter(int row, int col) const;
};

Frame RenderBev(const world::WorldState& state, const world::EgoState& anchor,
                const world::RoadLayout& layout, const RasterConfig& cfg = {});

/// Solid lane-divider strokes only (ids 0 and 5).
Frame RenderPriorLane(const world::WorldState& future, const world::EgoState& anchor,
                      const world::RoadLayout& layout, const RasterConfig& cfg = {});

/// One-pixel outlines of agent footprints only (ids 0 and 6).
Frame RenderPriorBoxes(const world::WorldState& future, const world::EgoState& anchor,
                       const world::RoadLayout& layout, const RasterConfig& cfg = {});

/// Overlays prior pixels on `future`; boxes win over lanes where both are set.
Frame ComposeUnifiedCot(const Frame& future, const Frame& lane, const Frame& boxes);

/// Binary PPM (P6) with the palette expanded to RGB.
std::string ExportPpm(const Frame& frame);
/// Inverse of ExportPpm; every color must be a palette entry.
Frame ParsePpm(std::string_view bytes);

}  // namespace fsd::raster
