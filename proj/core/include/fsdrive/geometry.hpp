// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>

namespace fsd {

struct Vec2 {
  double x = 0.0;  // lateral, positive to the right
  double y = 0.0;  // forward

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
  double Norm() const { return std::hypot(x, y); }
};

inline double Dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

// Heading is measured counter-clockwise from the +y (forward) axis, so the
// unit direction of travel is (-sin h, cos h).
inline Vec2 Rotate(Vec2 v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

inline double HeadingOf(Vec2 direction) { return std::atan2(-direction.x, direction.y); }

/// Rectangle with `length` along its heading and `width` across it.
struct OrientedBox {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;
  double width = 0.0;

  std::array<Vec2, 4> Corners() const;
};

/// True iff the two rectangles share a region of positive area
/// (separating-axis test; touching edges do not count).
bool BoxesOverlap(const OrientedBox& a, const OrientedBox& b);

}  // namespace fsd
