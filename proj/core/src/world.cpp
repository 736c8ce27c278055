// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <optional>

#include "fsdrive/error.hpp"
#include "fsdrive/rng.hpp"

namespace fsd::world {

using nlohmann::json;

const char* BehaviorName(Behavior b) {
  switch (b) {
    case Behavior::kConstantSpeed: return "constant-speed";
    case Behavior::kDecelerating: return "decelerating";
    case Behavior::kLaneChange: return "lane-change";
  }
  return "?";
}

const char* CommandName(Command c) {
  switch (c) {
    case Command::kKeep: return "KEEP";
    case Command::kLeft: return "LEFT";
    case Command::kRight: return "RIGHT";
  }
  return "?";
}

Behavior BehaviorFromName(const std::string& name) {
  for (Behavior b : {Behavior::kConstantSpeed, Behavior::kDecelerating, Behavior::kLaneChange}) {
    if (name == BehaviorName(b)) return b;
  }
  Fail(ErrorKind::kDecode, "unknown behavior '" + name + "'");
}

Command CommandFromName(const std::string& name) {
  for (Command c : {Command::kKeep, Command::kLeft, Command::kRight}) {
    if (name == CommandName(c)) return c;
  }
  Fail(ErrorKind::kDecode, "unknown command '" + name + "'");
}

void WorldConfig::Validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    Fail(ErrorKind::kConfig, "world." + field + ": " + why);
  };
  if (num_lanes < 2 || num_lanes > 4) bad("num_lanes", "must be in 2..=4");
  if (!(lane_width > 0.0)) bad("lane_width", "must be positive");
  if (!(road_length > 0.0)) bad("road_length", "must be positive");
  if (num_agents < 0 || num_agents > 8) bad("num_agents", "must be in 0..=8");
  const double w[] = {behavior_mix.constant_speed, behavior_mix.decelerating,
                      behavior_mix.lane_change};
  for (double x : w) {
    if (x < 0.0) bad("behavior_mix", "weights must be non-negative");
  }
  if (std::abs(w[0] + w[1] + w[2] - 1.0) > 1e-9) bad("behavior_mix", "weights must sum to 1");
  if (ego_speed_min < 0.0 || ego_speed_max < ego_speed_min) bad("ego_speed_min", "invalid ego speed range");
  if (ego_speed_max > kMaxAgentSpeed) bad("ego_speed_max", "exceeds 25 m/s");
  if (agent_speed_min < 0.0 || agent_speed_max < agent_speed_min) bad("agent_speed_min", "invalid agent speed range");
  if (agent_speed_max > kMaxAgentSpeed) bad("agent_speed_max", "exceeds 25 m/s");
  if (ego_accel_choices.empty()) bad("ego_accel_choices", "must not be empty");
  if (ego_lane_change_prob < 0.0 || ego_lane_change_prob > 1.0) bad("ego_lane_change_prob", "must be in [0,1]");
}

RoadLayout MakeLayout(int num_lanes, double lane_width, double road_length) {
  RoadLayout layout;
  layout.num_lanes = num_lanes;
  layout.lane_width = lane_width;
  layout.road_length = road_length;
  for (int i = 0; i <= num_lanes; ++i) {
    const double x = layout.DividerX(i);
    layout.divider_polylines.push_back({{x, 0.0}, {x, road_length}});
  }
  return layout;
}

WorldState StepDynamics(const WorldState& state, const RoadLayout& layout, Command command,
                        double dt) {
  WorldState next = state;
  next.step = state.step + 1;
  const double quarter = layout.lane_width / kLaneChangeSteps;

  for (Agent& a : next.agents) {
    if (a.behavior == Behavior::kLaneChange && a.change_start >= 0 && a.target_lane >= 0 &&
        state.step >= a.change_start && a.change_progress < kLaneChangeSteps) {
      const int dir = a.target_lane > a.lane ? 1 : -1;
      ++a.change_progress;
      a.d = dir * a.change_progress * quarter;
      if (a.change_progress == kLaneChangeSteps) {
        a.lane = a.target_lane;
        a.d = 0.0;
      }
    }
    a.s += a.speed * dt;
    if (a.behavior == Behavior::kDecelerating) a.speed = std::max(0.0, a.speed - kDecelRate * dt);
  }

  EgoState& ego = next.ego;
  if (next.ego_target_lane < 0 && command != Command::kKeep) {
    const int target = next.ego_lane + (command == Command::kLeft ? -1 : 1);
    if (target >= 0 && target < layout.num_lanes) {
      next.ego_target_lane = target;
      next.ego_progress = 0;
    }
  }
  if (next.ego_target_lane >= 0) {
    const int dir = next.ego_target_lane > next.ego_lane ? 1 : -1;
    ++next.ego_progress;
    ego.x = layout.LaneCenter(next.ego_lane) + dir * next.ego_progress * quarter;
    if (next.ego_progress == kLaneChangeSteps) {
      next.ego_lane = next.ego_target_lane;
      next.ego_target_lane = -1;
      next.ego_progress = 0;
      ego.x = layout.LaneCenter(next.ego_lane);
    }
  }
  ego.y += ego.speed * dt;
  ego.speed = std::max(0.0, ego.speed + ego.accel * dt);
  return next;
}

namespace {

std::vector<WorldState> Simulate(const WorldState& initial, const RoadLayout& layout,
                                 const std::vector<Command>& commands) {
  std::vector<WorldState> timeline;
  timeline.reserve(kNumStates);
  timeline.push_back(initial);
  for (int k = 1; k < kNumStates; ++k) {
    timeline.push_back(StepDynamics(timeline.back(), layout, commands[k - 1]));
  }
  return timeline;
}

// First agent (by index in the initial state) that spoils the episode: it
// overlaps the ego, lies on the ground-truth plan of some planning step, or
// overlaps a lower-indexed agent.
std::optional<size_t> FindOffender(const ScenarioEpisode& ep) {
  const auto& layout = ep.layout;
  for (const WorldState& ws : ep.timeline) {
    const auto ego_box = ws.ego.Footprint();
    for (size_t i = 0; i < ws.agents.size(); ++i) {
      if (BoxesOverlap(ego_box, ws.agents[i].Footprint(layout))) return i;
      for (size_t j = 0; j < i; ++j) {
        if (BoxesOverlap(ws.agents[j].Footprint(layout), ws.agents[i].Footprint(layout))) return i;
      }
    }
  }
  for (int t = 0; t + kHorizon < kNumStates; ++t) {
    const auto boxes = EgoFootprintsAlong(ep.timeline[t].ego, EgoFutureTrajectory(ep, t));
    for (int k = 0; k < kHorizon; ++k) {
      const auto& agents = ep.timeline[t + k + 1].agents;
      for (size_t i = 0; i < agents.size(); ++i) {
        if (BoxesOverlap(boxes[k], agents[i].Footprint(layout))) return i;
      }
    }
  }
  return std::nullopt;
}

}  // namespace

ScenarioEpisode GenerateScene(uint64_t seed, const WorldConfig& config) {
  config.Validate();
  Rng rng(seed);
  ScenarioEpisode ep;
  ep.seed = seed;
  ep.config = config;
  ep.layout = MakeLayout(config.num_lanes, config.lane_width, config.road_length);
  const auto& layout = ep.layout;

  WorldState s0;
  s0.ego_lane = static_cast<int>(rng.Below(config.num_lanes));
  s0.ego.x = layout.LaneCenter(s0.ego_lane);
  s0.ego.y = 20.0;
  s0.ego.speed = rng.Uniform(config.ego_speed_min, config.ego_speed_max);
  s0.ego.accel = config.ego_accel_choices[rng.Below(config.ego_accel_choices.size())];

  ep.commands.assign(kNumStates, Command::kKeep);
  const bool change = rng.Uniform() < config.ego_lane_change_prob;
  const int trigger = static_cast<int>(rng.Below(11));
  const bool go_left = rng.Below(2) == 0;
  if (change) {
    Command c = go_left ? Command::kLeft : Command::kRight;
    if (go_left && s0.ego_lane == 0) c = Command::kRight;
    if (!go_left && s0.ego_lane == config.num_lanes - 1) c = Command::kLeft;
    ep.commands[trigger] = c;
  }

  const double mix[] = {config.behavior_mix.constant_speed, config.behavior_mix.decelerating,
                        config.behavior_mix.lane_change};
  const auto ego_box = s0.ego.Footprint();
  for (int i = 0; i < config.num_agents; ++i) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Agent a;
      a.lane = static_cast<int>(rng.Below(config.num_lanes));
      a.s = s0.ego.y + rng.Uniform(-16.0, 44.0);
      a.speed = rng.Uniform(config.agent_speed_min, config.agent_speed_max);
      a.length = rng.Uniform(3.8, 5.2);
      a.width = rng.Uniform(1.8, 2.2);
      a.behavior = static_cast<Behavior>(rng.Categorical(mix));
      const int start = static_cast<int>(rng.Below(11));
      const bool left = rng.Below(2) == 0;
      if (a.behavior == Behavior::kLaneChange) {
        int target = a.lane + (left ? -1 : 1);
        if (target < 0 || target >= config.num_lanes) target = a.lane + (left ? 1 : -1);
        a.change_start = start;
        a.target_lane = target;
      }
      if (a.s - 0.5 * a.length < 0.0 || a.s + 0.5 * a.length > layout.road_length) continue;
      // One meter of longitudinal clearance on each side at spawn.
      OrientedBox padded = a.Footprint(layout);
      padded.length += 2.0;
      bool clear = !BoxesOverlap(padded, ego_box);
      for (const Agent& other : s0.agents) {
        clear = clear && !BoxesOverlap(padded, other.Footprint(layout));
      }
      if (!clear) continue;
      s0.agents.push_back(a);
      break;
    }
  }

  for (;;) {
    for (size_t i = 0; i < s0.agents.size(); ++i) s0.agents[i].id = static_cast<int>(i);
    ep.timeline = Simulate(s0, layout, ep.commands);
    auto offender = FindOffender(ep);
    if (!offender) break;
    s0.agents.erase(s0.agents.begin() + static_cast<std::ptrdiff_t>(*offender));
  }
  return ep;
}

Vec2 ToEgoFrame(const EgoState& anchor, Vec2 world_point) {
  return Rotate(world_point - anchor.Position(), -anchor.heading);
}

Vec2 FromEgoFrame(const EgoState& anchor, Vec2 ego_point) {
  return anchor.Position() + Rotate(ego_point, anchor.heading);
}

Trajectory EgoFutureTrajectory(const ScenarioEpisode& episode, int t) {
  FSD_CHECK(t >= 0 && t + kHorizon < static_cast<int>(episode.timeline.size()), ErrorKind::kRange,
            "trajectory horizon overflow at t=" + std::to_string(t));
  Trajectory traj;
  const EgoState& anchor = episode.timeline[t].ego;
  for (int k = 1; k <= kHorizon; ++k) {
    traj.waypoints[k - 1] = ToEgoFrame(anchor, episode.timeline[t + k].ego.Position());
  }
  return traj;
}

Command NavigationCommand(const ScenarioEpisode& episode, int t) {
  FSD_CHECK(t >= 0 && t + kHorizon < static_cast<int>(episode.timeline.size()), ErrorKind::kRange,
            "command horizon overflow at t=" + std::to_string(t));
  const double dx = episode.timeline[t + kHorizon].ego.x - episode.timeline[t].ego.x;
  if (dx < -0.5) return Command::kLeft;
  if (dx > 0.5) return Command::kRight;
  return Command::kKeep;
}

std::array<OrientedBox, kHorizon> EgoFootprintsAlong(const EgoState& anchor,
                                                     const Trajectory& traj) {
  std::array<OrientedBox, kHorizon> boxes;
  Vec2 prev{0.0, 0.0};
  double rel_heading = 0.0;
  for (int k = 0; k < kHorizon; ++k) {
    const Vec2 w = traj.waypoints[k];
    const Vec2 delta = w - prev;
    if (delta.Norm() > 1e-6) rel_heading = HeadingOf(delta);
    boxes[k] = {FromEgoFrame(anchor, w), anchor.heading + rel_heading, kEgoLength, kEgoWidth};
    prev = w;
  }
  return boxes;
}

CollisionReport CheckCollision(const ScenarioEpisode& episode, const Trajectory& traj, int t) {
  FSD_CHECK(t >= 0 && t + kHorizon < static_cast<int>(episode.timeline.size()), ErrorKind::kRange,
            "collision horizon overflow at t=" + std::to_string(t));
  CollisionReport report;
  const auto boxes = EgoFootprintsAlong(episode.timeline[t].ego, traj);
  for (int k = 0; k < kHorizon; ++k) {
    for (const Agent& a : episode.timeline[t + k + 1].agents) {
      if (BoxesOverlap(boxes[k], a.Footprint(episode.layout))) {
        report.per_waypoint[k] = true;
        break;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

namespace {

double Sig9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}

json ConfigJson(const WorldConfig& c) {
  json accel = json::array();
  for (double a : c.ego_accel_choices) accel.push_back(Sig9(a));
  return {{"num_lanes", c.num_lanes},
          {"lane_width", Sig9(c.lane_width)},
          {"road_length", Sig9(c.road_length)},
          {"num_agents", c.num_agents},
          {"behavior_mix",
           {{"constant-speed", Sig9(c.behavior_mix.constant_speed)},
            {"decelerating", Sig9(c.behavior_mix.decelerating)},
            {"lane-change", Sig9(c.behavior_mix.lane_change)}}},
          {"ego_speed_min", Sig9(c.ego_speed_min)},
          {"ego_speed_max", Sig9(c.ego_speed_max)},
          {"ego_accel_choices", accel},
          {"agent_speed_min", Sig9(c.agent_speed_min)},
          {"agent_speed_max", Sig9(c.agent_speed_max)},
          {"ego_lane_change_prob", Sig9(c.ego_lane_change_prob)}};
}

WorldConfig ConfigFromJson(const json& j) {
  WorldConfig c;
  c.num_lanes = j.at("num_lanes").get<int>();
  c.lane_width = j.at("lane_width").get<double>();
  c.road_length = j.at("road_length").get<double>();
  c.num_agents = j.at("num_agents").get<int>();
  const auto& mix = j.at("behavior_mix");
  c.behavior_mix = {mix.at("constant-speed").get<double>(), mix.at("decelerating").get<double>(),
                    mix.at("lane-change").get<double>()};
  c.ego_speed_min = j.at("ego_speed_min").get<double>();
  c.ego_speed_max = j.at("ego_speed_max").get<double>();
  c.ego_accel_choices = j.at("ego_accel_choices").get<std::vector<double>>();
  c.agent_speed_min = j.at("agent_speed_min").get<double>();
  c.agent_speed_max = j.at("agent_speed_max").get<double>();
  c.ego_lane_change_prob = j.at("ego_lane_change_prob").get<double>();
  return c;
}

json StateJson(const WorldState& s) {
  json agents = json::array();
  for (const Agent& a : s.agents) {
    agents.push_back({{"id", a.id},
                      {"lane", a.lane},
                      {"s", Sig9(a.s)},
                      {"d", Sig9(a.d)},
                      {"speed", Sig9(a.speed)},
                      {"length", Sig9(a.length)},
                      {"width", Sig9(a.width)},
                      {"behavior", BehaviorName(a.behavior)},
                      {"change_start", a.change_start},
                      {"target_lane", a.target_lane},
                      {"change_progress", a.change_progress}});
  }
  return {{"step", s.step},
          {"ego",
           {{"x", Sig9(s.ego.x)},
            {"y", Sig9(s.ego.y)},
            {"heading", Sig9(s.ego.heading)},
            {"speed", Sig9(s.ego.speed)},
            {"accel", Sig9(s.ego.accel)}}},
          {"ego_lane", s.ego_lane},
          {"ego_target_lane", s.ego_target_lane},
          {"ego_progress", s.ego_progress},
          {"agents", agents}};
}

bool Close(double a, double b) { return std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(b)); }

}  // namespace

std::string EpisodeToJsonLine(const ScenarioEpisode& ep) {
  json dividers = json::array();
  for (const auto& line : ep.layout.divider_polylines) {
    json pts = json::array();
    for (Vec2 p : line) pts.push_back({Sig9(p.x), Sig9(p.y)});
    dividers.push_back(pts);
  }
  json timeline = json::array();
  for (const auto& s : ep.timeline) timeline.push_back(StateJson(s));
  json commands = json::array();
  for (Command c : ep.commands) commands.push_back(CommandName(c));
  json j = {{"seed", ep.seed},
            {"config", ConfigJson(ep.config)},
            {"layout",
             {{"num_lanes", ep.layout.num_lanes},
              {"lane_width", Sig9(ep.layout.lane_width)},
              {"road_length", Sig9(ep.layout.road_length)},
              {"divider_polylines", dividers}}},
            {"timeline", timeline},
            {"commands", commands}};
  return j.dump();
}

ScenarioEpisode EpisodeFromJsonLine(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    Fail(ErrorKind::kDecode, std::string("episode line is not valid JSON: ") + e.what());
  }
  try {
    const uint64_t seed = j.at("seed").get<uint64_t>();
    ScenarioEpisode ep = GenerateScene(seed, ConfigFromJson(j.at("config")));
    const auto& stored = j.at("timeline");
    FSD_CHECK(stored.size() == ep.timeline.size(), ErrorKind::kDecode,
              "episode " + std::to_string(seed) + ": timeline length mismatch");
    for (size_t k = 0; k < stored.size(); ++k) {
      const auto& sj = stored[k];
      const auto& ws = ep.timeline[k];
      bool ok = Close(sj.at("ego").at("x").get<double>(), ws.ego.x) &&
                Close(sj.at("ego").at("y").get<double>(), ws.ego.y) &&
                sj.at("agents").size() == ws.agents.size();
      for (size_t i = 0; ok && i < ws.agents.size(); ++i) {
        ok = Close(sj.at("agents")[i].at("s").get<double>(), ws.agents[i].s) &&
             Close(sj.at("agents")[i].at("d").get<double>(), ws.agents[i].d);
      }
      FSD_CHECK(ok, ErrorKind::kDecode,
                "episode " + std::to_string(seed) + ": stored timeline disagrees with regeneration at step " +
                    std::to_string(k));
    }
    return ep;
  } catch (const json::exception& e) {
    Fail(ErrorKind::kDecode, std::string("episode line malformed: ") + e.what());
  }
}

}  // namespace fsd::world
