// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic multi-lane driving world: scene generation, kinematics, ground
// truth ego trajectories and footprint collision checks.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fsdrive/geometry.hpp"

namespace fsd::world {

inline constexpr double kDt = 0.5;
inline constexpr int kNumStates = 17;  // 8 s at 0.5 s
inline constexpr int kHorizon = 6;     // waypoints per trajectory (3 s)
inline constexpr int kLaneChangeSteps = 4;
inline constexpr double kEgoLength = 4.5;
inline constexpr double kEgoWidth = 2.0;
inline constexpr double kMaxAgentSpeed = 25.0;
inline constexpr double kDecelRate = 2.0;  // m/s^2 for decelerating agents

enum class Behavior { kConstantSpeed, kDecelerating, kLaneChange };
enum class Command { kKeep, kLeft, kRight };

const char* BehaviorName(Behavior b);
const char* CommandName(Command c);
Behavior BehaviorFromName(const std::string& name);
Command CommandFromName(const std::string& name);

using Polyline = std::vector<Vec2>;

// Lane 0 is the leftmost lane; world x grows to the right, world y forward.
struct RoadLayout {
  int num_lanes = 3;
  double lane_width = 4.0;
  double road_length = 200.0;
  std::vector<Polyline> divider_polylines;  // num_lanes + 1, left to right

  double LaneCenter(int lane) const { return (lane + 0.5) * lane_width; }
  double DividerX(int index) const { return index * lane_width; }
  double RoadWidth() const { return num_lanes * lane_width; }
};

struct Agent {
  int id = 0;
  int lane = 0;
  double s = 0.0;  // longitudinal position (world y)
  double d = 0.0;  // lateral offset from the lane center
  double speed = 0.0;
  double length = 4.5;
  double width = 1.9;
  Behavior behavior = Behavior::kConstantSpeed;
  int change_start = -1;  // lane-change trigger step, -1 when not planned
  int target_lane = -1;
  int change_progress = 0;  // steps already executed of the active maneuver

  Vec2 Position(const RoadLayout& layout) const { return {layout.LaneCenter(lane) + d, s}; }
  OrientedBox Footprint(const RoadLayout& layout) const {
    return {Position(layout), 0.0, length, width};
  }
};

struct EgoState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double speed = 0.0;
  double accel = 0.0;

  Vec2 Position() const { return {x, y}; }
  OrientedBox Footprint() const { return {{x, y}, heading, kEgoLength, kEgoWidth}; }
};

struct WorldState {
  int step = 0;
  EgoState ego;
  int ego_lane = 0;
  int ego_target_lane = -1;  // -1 when no maneuver is active
  int ego_progress = 0;
  std::vector<Agent> agents;
};

struct BehaviorMix {
  double constant_speed = 0.5;
  double decelerating = 0.25;
  double lane_change = 0.25;
};

struct WorldConfig {
  int num_lanes = 3;
  double lane_width = 4.0;
  double road_length = 200.0;
  int num_agents = 6;
  BehaviorMix behavior_mix;
  double ego_speed_min = 3.0;
  double ego_speed_max = 12.0;
  std::vector<double> ego_accel_choices = {0.0};
  double agent_speed_min = 2.0;
  double agent_speed_max = 16.0;
  double ego_lane_change_prob = 0.5;

  /// Throws ErrorKind::kConfig naming the offending field.
  void Validate() const;
};

struct ScenarioEpisode {
  uint64_t seed = 0;
  WorldConfig config;
  RoadLayout layout;
  std::vector<WorldState> timeline;  // kNumStates entries
  std::vector<Command> commands;     // one per timestep
};

struct Trajectory {
  std::array<Vec2, kHorizon> waypoints{};  // ego frame, 0.5 s apart
};

struct CollisionReport {
  std::array<bool, kHorizon> per_waypoint{};
  bool At1s() const { return per_waypoint[1]; }
  bool At2s() const { return per_waypoint[3]; }
  bool At3s() const { return per_waypoint[5]; }
};

RoadLayout MakeLayout(int num_lanes, double lane_width, double road_length);

ScenarioEpisode GenerateScene(uint64_t seed, const WorldConfig& config);

WorldState StepDynamics(const WorldState& state, const RoadLayout& layout,
                        Command command, double dt = kDt);

/// World point expressed in the frame of `anchor` (x lateral, y forward).
Vec2 ToEgoFrame(const EgoState& anchor, Vec2 world_point);
Vec2 FromEgoFrame(const EgoState& anchor, Vec2 ego_point);

Trajectory EgoFutureTrajectory(const ScenarioEpisode& episode, int t);

/// Navigation command implied by the ground-truth lateral motion over the
/// planning horizon starting at t.
Command NavigationCommand(const ScenarioEpisode& episode, int t);

/// Ego footprints placed along the trajectory; heading from consecutive
/// waypoints. Box k is the footprint at timestep t + k + 1.
std::array<OrientedBox, kHorizon> EgoFootprintsAlong(const EgoState& anchor,
                                                     const Trajectory& traj);

CollisionReport CheckCollision(const ScenarioEpisode& episode, const Trajectory& traj, int t);

// JSON-lines persistence; one episode per line.
std::string EpisodeToJsonLine(const ScenarioEpisode& episode);
/// Parses a line and regenerates the episode from its seed and config; the
/// stored timeline must agree with the regenerated one.
ScenarioEpisode EpisodeFromJsonLine(const std::string& line);

}  // namespace fsd::world
