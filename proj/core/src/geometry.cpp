// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/geometry.hpp"

#include <algorithm>

namespace fsd {

std::array<Vec2, 4> OrientedBox::Corners() const {
  const Vec2 along{-std::sin(heading), std::cos(heading)};
  const Vec2 across{std::cos(heading), std::sin(heading)};
  const Vec2 a = (0.5 * length) * along;
  const Vec2 b = (0.5 * width) * across;
  return {center + a + b, center + a - b, center - a - b, center - a + b};
}

namespace {

constexpr double kSeparationEps = 1e-9;

bool SeparatedOn(Vec2 axis, const std::array<Vec2, 4>& pa, const std::array<Vec2, 4>& pb) {
  double amin = Dot(axis, pa[0]), amax = amin;
  double bmin = Dot(axis, pb[0]), bmax = bmin;
  for (int i = 1; i < 4; ++i) {
    const double da = Dot(axis, pa[i]);
    const double db = Dot(axis, pb[i]);
    amin = std::min(amin, da);
    amax = std::max(amax, da);
    bmin = std::min(bmin, db);
    bmax = std::max(bmax, db);
  }
  return amax <= bmin + kSeparationEps || bmax <= amin + kSeparationEps;
}

}  // namespace

bool BoxesOverlap(const OrientedBox& a, const OrientedBox& b) {
  const auto pa = a.Corners();
  const auto pb = b.Corners();
  for (double h : {a.heading, b.heading}) {
    const Vec2 along{-std::sin(h), std::cos(h)};
    const Vec2 across{std::cos(h), std::sin(h)};
    if (SeparatedOn(along, pa, pb) || SeparatedOn(across, pa, pb)) return false;
  }
  return true;
}

}  // namespace fsd
