// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/raster.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fsdrive/curriculum.hpp"
#include "fsdrive/error.hpp"
#include "fsdrive/rng.hpp"

namespace fsd::raster {
namespace {

using world::Agent;
using world::MakeLayout;
using world::RoadLayout;
using world::WorldState;

WorldState EgoAt(const RoadLayout& layout, int lane) {
  WorldState s;
  s.ego_lane = lane;
  s.ego.x = layout.LaneCenter(lane);
  s.ego.y = 50.0;
  return s;
}

Agent AgentAt(int lane, double s, double length, double width) {
  Agent a;
  a.lane = lane;
  a.s = s;
  a.length = length;
  a.width = width;
  return a;
}

int Count(const Frame& f, uint8_t id) { return static_cast<int>(std::count(f.pixels.begin(), f.pixels.end(), id)); }

std::set<uint8_t> Ids(const Frame& f) { return {f.pixels.begin(), f.pixels.end()}; }

struct CellBox {
  int rmin = kHeight, rmax = -1, cmin = kWidth, cmax = -1;
  int rows() const { return rmax - rmin + 1; }
  int cols() const { return cmax - cmin + 1; }
};

CellBox Bounds(const Frame& f, uint8_t id) {
  CellBox b;
  for (int r = 0; r < kHeight; ++r) {
    for (int c = 0; c < kWidth; ++c) {
      if (f.At(r, c) != id) continue;
      b.rmin = std::min(b.rmin, r);
      b.rmax = std::max(b.rmax, r);
      b.cmin = std::min(b.cmin, c);
      b.cmax = std::max(b.cmax, c);
    }
  }
  return b;
}

TEST(Config, DefaultWindowDividesIntoGrid) {
  const RasterConfig cfg;
  EXPECT_NO_THROW(cfg.Validate());
  EXPECT_DOUBLE_EQ(cfg.lateral_extent / cfg.meters_per_px_lateral, kWidth);
  EXPECT_DOUBLE_EQ(cfg.forward_extent / cfg.meters_per_px_forward, kHeight);
  RasterConfig bad;
  bad.meters_per_px_forward = 1.0;
  EXPECT_THROW(bad.Validate(), Error);
}

TEST(RenderBev, EmptyWorldIsRoadAndOffRoad) {
  const auto layout = MakeLayout(2, 4.0, 200.0);
  const auto s = EgoAt(layout, 0);
  const RasterConfig cfg;
  const Frame f = RenderBev(s, s.ego, layout, cfg);
  const auto ego = s.ego.Footprint();
  int offroad = 0;
  for (int r = 0; r < kHeight; ++r) {
    for (int c = 0; c < kWidth; ++c) {
      const Vec2 w = world::FromEgoFrame(s.ego, cfg.CellCenter(r, c));
      const uint8_t id = f.At(r, c);
      if (id == kEgo) {
        EXPECT_LT(std::abs(w.x - ego.center.x), 0.5 * ego.width);
        continue;
      }
      if (id == kMarking) continue;
      const bool on_road = w.x >= 0.0 && w.x < layout.RoadWidth();
      EXPECT_EQ(id, on_road ? kRoad : kOffRoad) << r << "," << c;
      offroad += id == kOffRoad;
    }
  }
  EXPECT_EQ(offroad, 16 * kHeight);  // 4 m left of the road
  EXPECT_EQ(Ids(f), (std::set<uint8_t>{kOffRoad, kRoad, kMarking, kEgo}));
}

TEST(RenderBev, AgentAreaMatchesFootprint) {
  const auto layout = MakeLayout(3, 4.0, 200.0);
  const RasterConfig cfg;
  for (double ds : {10.0, 15.3, 22.75}) {
    WorldState s = EgoAt(layout, 1);
    s.agents.push_back(AgentAt(0, s.ego.y + ds, 4.0, 2.0));
    const Frame f = RenderBev(s, s.ego, layout, cfg);
    const double cols = 2.0 / cfg.meters_per_px_lateral, rows = 4.0 / cfg.meters_per_px_forward;
    const int n = Count(f, kAgentBody);
    EXPECT_GE(n, (cols - 2) * (rows - 2)) << ds;
    EXPECT_LE(n, (cols + 2) * (rows + 2)) << ds;
    const auto b = Bounds(f, kAgentBody);
    EXPECT_EQ(b.rows() * b.cols(), n);  // a filled axis-aligned rectangle
  }
}

TEST(RenderBev, Deterministic) {
  const auto ep = world::GenerateScene(3, {});
  const auto& s = ep.timeline[4];
  EXPECT_EQ(RenderBev(s, s.ego, ep.layout).pixels, RenderBev(s, s.ego, ep.layout).pixels);
}

TEST(RenderBev, NeverEmitsPriorIds) {
  for (uint64_t seed = 0; seed < 60; ++seed) {
    const auto ep = world::GenerateScene(seed, {});
    for (const auto& s : ep.timeline) {
      const Frame f = RenderBev(s, ep.timeline[0].ego, ep.layout);
      EXPECT_EQ(Count(f, kPriorLane) + Count(f, kPriorBox) + Count(f, kReserved), 0);
    }
  }
}

TEST(RenderBev, AgentsInsideWindowPaintPixels) {
  const RasterConfig cfg;
  int checked = 0;
  for (uint64_t seed = 0; seed < 60; ++seed) {
    const auto ep = world::GenerateScene(seed, {});
    for (const auto& s : ep.timeline) {
      for (const auto& a : s.agents) {
        const Vec2 p = world::ToEgoFrame(s.ego, a.Position(ep.layout));
        const bool inside = std::abs(p.x) + 0.5 * a.width < 0.5 * cfg.lateral_extent &&
                            p.y - 0.5 * a.length > -cfg.behind &&
                            p.y + 0.5 * a.length < cfg.forward_extent - cfg.behind;
        if (!inside) continue;
        WorldState alone = s;
        alone.agents = {a};
        EXPECT_GE(Count(RenderBev(alone, s.ego, ep.layout, cfg), kAgentBody), 1);
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(Priors, ThreeLaneRoadHasFourDividerStrokes) {
  // 3.5 m lanes keep the whole 10.5 m road inside the 12 m window.
  const auto layout = MakeLayout(3, 3.5, 200.0);
  const auto s = EgoAt(layout, 1);
  const Frame f = RenderPriorLane(s, s.ego, layout);
  EXPECT_EQ(Ids(f), (std::set<uint8_t>{0, kPriorLane}));
  std::vector<int> stroke_cols;
  for (int c = 0; c < kWidth; ++c) {
    int n = 0;
    for (int r = 0; r < kHeight; ++r) n += f.At(r, c) == kPriorLane;
    if (n > 0) {
      EXPECT_EQ(n, kHeight);
      stroke_cols.push_back(c);
    }
  }
  ASSERT_EQ(stroke_cols.size(), 4u);
  for (size_t i = 1; i < stroke_cols.size(); ++i) EXPECT_EQ(stroke_cols[i] - stroke_cols[i - 1], 14);
}

TEST(Priors, NoAgentsGivesEmptyBoxFrame) {
  const auto layout = MakeLayout(3, 4.0, 200.0);
  const auto s = EgoAt(layout, 1);
  EXPECT_EQ(Count(RenderPriorBoxes(s, s.ego, layout), 0), kNumPixels);
}

TEST(Priors, TwoAgentsGiveDisjointOutlines) {
  const auto layout = MakeLayout(3, 4.0, 200.0);
  WorldState s = EgoAt(layout, 1);
  s.agents.push_back(AgentAt(0, s.ego.y + 10.0, 4.5, 2.0));
  s.agents.push_back(AgentAt(2, s.ego.y + 25.0, 5.0, 1.9));
  const Frame boxes = RenderPriorBoxes(s, s.ego, layout);
  EXPECT_EQ(Ids(boxes), (std::set<uint8_t>{0, kPriorBox}));
  const Frame body = RenderBev(s, s.ego, layout);

  // Split the outline pixels by side of the ego and check each perimeter.
  int total = 0;
  for (int side = 0; side < 2; ++side) {
    Frame half_boxes, half_body;
    for (int r = 0; r < kHeight; ++r) {
      for (int c = side * kWidth / 2; c < (side + 1) * kWidth / 2; ++c) {
        half_boxes.At(r, c) = boxes.At(r, c);
        half_body.At(r, c) = body.At(r, c);
      }
    }
    const auto b = Bounds(half_boxes, kPriorBox);
    const auto fill = Bounds(half_body, kAgentBody);
    EXPECT_EQ(b.rows(), fill.rows());
    EXPECT_EQ(b.cols(), fill.cols());
    EXPECT_EQ(Count(half_boxes, kPriorBox), 2 * (b.rows() + b.cols()) - 4);
    total += Count(half_boxes, kPriorBox);
  }
  EXPECT_EQ(total, Count(boxes, kPriorBox));
}

Frame RandomFrame(Rng& rng, std::initializer_list<uint8_t> ids, double density) {
  Frame f;
  const std::vector<uint8_t> choices(ids);
  for (auto& p : f.pixels) p = rng.Uniform() < density ? choices[rng.Below(choices.size())] : 0;
  return f;
}

TEST(Compose, ZeroPriorsIsIdentity) {
  Rng rng(1);
  const Frame future = RandomFrame(rng, {1, 2, 3, 4}, 1.0);
  EXPECT_EQ(ComposeUnifiedCot(future, Frame{}, Frame{}), future);
}

TEST(Compose, BoxesWinOverLanes) {
  Frame future, lane, boxes;
  future.At(3, 4) = kRoad;
  lane.At(3, 4) = kPriorLane;
  boxes.At(3, 4) = kPriorBox;
  lane.At(5, 5) = kPriorLane;
  const Frame out = ComposeUnifiedCot(future, lane, boxes);
  EXPECT_EQ(out.At(3, 4), kPriorBox);
  EXPECT_EQ(out.At(5, 5), kPriorLane);
}

TEST(Compose, BasePixelsSurviveAndOverlayIsIdempotent) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Frame future = RandomFrame(rng, {0, 1, 2, 3, 4}, 1.0);
    const Frame lane = RandomFrame(rng, {kPriorLane}, 0.2);
    const Frame boxes = RandomFrame(rng, {kPriorBox}, 0.2);
    const Frame out = ComposeUnifiedCot(future, lane, boxes);
    for (int i = 0; i < kNumPixels; ++i) {
      if (lane.pixels[i] == 0 && boxes.pixels[i] == 0) {
        EXPECT_EQ(out.pixels[i], future.pixels[i]);
      }
    }
    EXPECT_EQ(ComposeUnifiedCot(out, lane, boxes), out);
  }
}

TEST(Compose, SizeMismatchIsShapeError) {
  Frame small;
  small.width = 8;
  small.height = 8;
  small.pixels.assign(64, 0);
  try {
    ComposeUnifiedCot(Frame{}, small, Frame{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShape);
  }
}

TEST(Ppm, HeaderAndZeroPayload) {
  const std::string header = "P6\n48 32\n255\n";
  const std::string ppm = ExportPpm(Frame{});
  ASSERT_EQ(ppm.size(), header.size() + 3u * kNumPixels);
  EXPECT_EQ(ppm.substr(0, header.size()), header);
  const Rgb c = Palette()[0];
  for (int i = 0; i < kNumPixels; ++i) {
    EXPECT_EQ(static_cast<uint8_t>(ppm[header.size() + 3 * i]), c.r);
    EXPECT_EQ(static_cast<uint8_t>(ppm[header.size() + 3 * i + 1]), c.g);
    EXPECT_EQ(static_cast<uint8_t>(ppm[header.size() + 3 * i + 2]), c.b);
  }
}

TEST(Ppm, ParseRoundTrip) {
  const auto ep = world::GenerateScene(11, {});
  const Frame f = curriculum::UnifiedCotFrame(ep, 4, {});
  EXPECT_EQ(ParsePpm(ExportPpm(f)), f);
  std::string bad = ExportPpm(f);
  bad.pop_back();
  EXPECT_THROW(ParsePpm(bad), Error);
}

TEST(Palette, IdsAreDistinct) {
  const auto& p = Palette();
  for (int i = 0; i < kNumPaletteIds; ++i) {
    for (int j = 0; j < i; ++j) EXPECT_FALSE(p[i] == p[j]);
  }
}

}  // namespace
}  // namespace fsd::raster
