// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/raster.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "fsdrive/error.hpp"

namespace fsd::raster {

using world::EgoState;
using world::RoadLayout;
using world::WorldState;

const std::array<Rgb, kNumPaletteIds>& Palette() {
  static const std::array<Rgb, kNumPaletteIds> kPalette = {{
      {34, 110, 34},    // off-road
      {90, 90, 90},     // road
      {235, 235, 235},  // lane marking
      {30, 144, 255},   // agent body
      {255, 215, 0},    // ego
      {255, 0, 0},      // prior lane divider
      {255, 110, 180},  // prior box outline
      {0, 0, 0},        // reserved
  }};
  return kPalette;
}

void RasterConfig::Validate() const {
  auto divides = [](double extent, double step, int cells) {
    return step > 0.0 && std::abs(extent / step - cells) < 1e-9;
  };
  FSD_CHECK(divides(lateral_extent, meters_per_px_lateral, kWidth), ErrorKind::kConfig,
            "raster.lateral_extent must divide into 48 columns");
  FSD_CHECK(divides(forward_extent, meters_per_px_forward, kHeight), ErrorKind::kConfig,
            "raster.forward_extent must divide into 32 rows");
  FSD_CHECK(behind >= 0.0 && behind < forward_extent, ErrorKind::kConfig,
            "raster.behind must lie inside the window");
}

Vec2 RasterConfig::CellCenter(int row, int col) const {
  return {-0.5 * lateral_extent + (col + 0.5) * meters_per_px_lateral,
          (forward_extent - behind) - (row + 0.5) * meters_per_px_forward};
}

namespace {

bool InsideBox(const OrientedBox& box, Vec2 p) {
  const Vec2 rel = Rotate(p - box.center, -box.heading);
  return std::abs(rel.y) < 0.5 * box.length && std::abs(rel.x) < 0.5 * box.width;
}

// Whether the cell centered at world x `wx` contains the divider line.
bool CellHoldsDivider(double wx, double divider_x, double half_cell) {
  return divider_x >= wx - half_cell && divider_x < wx + half_cell;
}

bool DashOn(double wy) {
  constexpr double kPeriod = 6.0;
  const double phase = wy - kPeriod * std::floor(wy / kPeriod);
  return phase < 3.0;
}

template <typename Fn>
void ForEachCell(const EgoState& anchor, const RasterConfig& cfg, Fn&& fn) {
  for (int r = 0; r < kHeight; ++r) {
    for (int c = 0; c < kWidth; ++c) {
      fn(r, c, world::FromEgoFrame(anchor, cfg.CellCenter(r, c)));
    }
  }
}

}  // namespace

Frame RenderBev(const WorldState& state, const EgoState& anchor, const RoadLayout& layout,
                const RasterConfig& cfg) {
  Frame f;
  const double half = 0.5 * cfg.meters_per_px_lateral;
  std::vector<OrientedBox> agents;
  for (const auto& a : state.agents) agents.push_back(a.Footprint(layout));
  const OrientedBox ego = state.ego.Footprint();

  ForEachCell(anchor, cfg, [&](int r, int c, Vec2 w) {
    uint8_t id = (w.x >= 0.0 && w.x < layout.RoadWidth()) ? kRoad : kOffRoad;
    for (int i = 0; i <= layout.num_lanes; ++i) {
      const bool interior = i > 0 && i < layout.num_lanes;
      if (CellHoldsDivider(w.x, layout.DividerX(i), half) && (!interior || DashOn(w.y))) {
        id = kMarking;
      }
    }
    for (const auto& box : agents) {
      if (InsideBox(box, w)) id = kAgentBody;
    }
    if (InsideBox(ego, w)) id = kEgo;
    f.At(r, c) = id;
  });
  return f;
}

Frame RenderPriorLane(const WorldState& /*future*/, const EgoState& anchor,
                      const RoadLayout& layout, const RasterConfig& cfg) {
  // The road is static, so the future divider geometry equals the layout's.
  Frame f;
  const double half = 0.5 * cfg.meters_per_px_lateral;
  ForEachCell(anchor, cfg, [&](int r, int c, Vec2 w) {
    for (int i = 0; i <= layout.num_lanes; ++i) {
      if (CellHoldsDivider(w.x, layout.DividerX(i), half)) f.At(r, c) = kPriorLane;
    }
  });
  return f;
}

Frame RenderPriorBoxes(const WorldState& future, const EgoState& anchor, const RoadLayout& layout,
                       const RasterConfig& cfg) {
  Frame f;
  for (const auto& agent : future.agents) {
    const OrientedBox box = agent.Footprint(layout);
    int rmin = kHeight, rmax = -1, cmin = kWidth, cmax = -1;
    ForEachCell(anchor, cfg, [&](int r, int c, Vec2 w) {
      if (!InsideBox(box, w)) return;
      rmin = std::min(rmin, r);
      rmax = std::max(rmax, r);
      cmin = std::min(cmin, c);
      cmax = std::max(cmax, c);
    });
    if (rmax < 0) continue;
    for (int r = rmin; r <= rmax; ++r) {
      for (int c = cmin; c <= cmax; ++c) {
        if (r == rmin || r == rmax || c == cmin || c == cmax) f.At(r, c) = kPriorBox;
      }
    }
  }
  return f;
}

Frame ComposeUnifiedCot(const Frame& future, const Frame& lane, const Frame& boxes) {
  FSD_CHECK(future.width == lane.width && future.height == lane.height &&
                future.width == boxes.width && future.height == boxes.height &&
                future.pixels.size() == lane.pixels.size() &&
                future.pixels.size() == boxes.pixels.size(),
            ErrorKind::kShape, "unified CoT inputs differ in size");
  Frame out = future;
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    if (boxes.pixels[i] != 0) {
      out.pixels[i] = boxes.pixels[i];
    } else if (lane.pixels[i] != 0) {
      out.pixels[i] = lane.pixels[i];
    }
  }
  return out;
}

std::string ExportPpm(const Frame& frame) {
  std::string out = "P6\n" + std::to_string(frame.width) + " " + std::to_string(frame.height) + "\n255\n";
  out.reserve(out.size() + 3 * frame.pixels.size());
  const auto& pal = Palette();
  for (uint8_t id : frame.pixels) {
    const Rgb c = pal[id < kNumPaletteIds ? id : kReserved];
    out.push_back(static_cast<char>(c.r));
    out.push_back(static_cast<char>(c.g));
    out.push_back(static_cast<char>(c.b));
  }
  return out;
}

Frame ParsePpm(std::string_view bytes) {
  size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  FSD_CHECK(token() == "P6", ErrorKind::kDecode, "not a binary PPM");
  Frame f;
  try {
    f.width = std::stoi(token());
    f.height = std::stoi(token());
    FSD_CHECK(std::stoi(token()) == 255, ErrorKind::kDecode, "PPM maxval must be 255");
  } catch (const std::logic_error&) {
    Fail(ErrorKind::kDecode, "malformed PPM header");
  }
  ++pos;  // single whitespace after maxval
  const size_t n = static_cast<size_t>(f.width) * f.height;
  FSD_CHECK(bytes.size() - pos == 3 * n, ErrorKind::kDecode, "PPM payload size mismatch");
  f.pixels.assign(n, 0);
  const auto& pal = Palette();
  for (size_t i = 0; i < n; ++i) {
    const Rgb c{static_cast<uint8_t>(bytes[pos + 3 * i]), static_cast<uint8_t>(bytes[pos + 3 * i + 1]),
                static_cast<uint8_t>(bytes[pos + 3 * i + 2])};
    auto it = std::find(pal.begin(), pal.end(), c);
    FSD_CHECK(it != pal.end(), ErrorKind::kDecode, "PPM color not in palette at pixel " + std::to_string(i));
    f.pixels[i] = static_cast<uint8_t>(it - pal.begin());
  }
  return f;
}

}  // namespace fsd::raster
