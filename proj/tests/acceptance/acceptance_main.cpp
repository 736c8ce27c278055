// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
//   fsdrive_acceptance --cli <fsdrive binary> --config <acceptance.toml> --work <dir> [--only 1,5,10]

#include <sys/wait.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsdrive/codec.hpp"
#include "fsdrive/curriculum.hpp"
#include "fsdrive/error.hpp"
#include "fsdrive/experiment.hpp"
#include "fsdrive/geometry.hpp"
#include "fsdrive/hash.hpp"
#include "fsdrive/io.hpp"
#include "fsdrive/metrics.hpp"
#include "fsdrive/model.hpp"
#include "fsdrive/planner.hpp"
#include "fsdrive/rng.hpp"
#include "fsdrive/world.hpp"

namespace {

using namespace fsd;
using namespace fsd::experiment;
using curriculum::CotVariant;
using json = nlohmann::json;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path cli;
  fs::path config;
  fs::path work;
  std::vector<uint64_t> seeds = {1, 2, 3};
};

std::string Fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

struct ProcessResult {
  int status = -1;
  std::string out;
};

ProcessResult RunProcess(const std::string& command) {
  ProcessResult r;
  FILE* pipe = popen(command.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string Quote(const fs::path& p) { return "'" + p.string() + "'"; }

// ---------------------------------------------------------------------------
// 1. Reported aggregation arithmetic

Outcome MetricArithmetic() {
  const auto l2_uniad = metrics::MakeTriple(0.40, 0.89, 1.60);
  const auto l2_stp3 = metrics::MakeTriple(0.28, 0.52, 0.80);
  const auto coll = metrics::MakeTriple(0.07, 0.12, 1.02);
  const bool ok = std::abs(l2_uniad.avg - 0.96) <= 0.005 && std::abs(l2_stp3.avg - 0.53) <= 0.005 &&
                  std::abs(coll.avg - 0.40) <= 0.005;
  return {ok, "l2 uniad avg " + Fmt(l2_uniad.avg) + ", l2 stp3 avg " + Fmt(l2_stp3.avg) + ", collision avg " +
                  Fmt(coll.avg)};
}

// ---------------------------------------------------------------------------
// 2. Codec round trip over training frames

Outcome CodecExactness() {
  const ExperimentConfig cfg;
  const Dataset data = GenerateDataset(cfg.world, cfg.train_scenes, 0, cfg.data_seed, 1);
  const auto cb = CodebookFromEpisodes(data.train, cfg.raster, codec::kDefaultCapacity);
  const bool no_overflow = cb.size() < cb.capacity();
  long frames = 0, mismatches = 0, bad_counts = 0;
  for (int e = 0; e < 200; ++e) {
    const auto& ep = data.train[static_cast<size_t>(e)];
    for (int t = curriculum::kFirstT; t <= curriculum::kLastT; ++t) {
      std::vector<raster::Frame> fs;
      for (const auto& f : curriculum::ObservationFrames(ep, t, cfg.raster)) fs.push_back(f);
      fs.push_back(curriculum::FutureFrame(ep, t, cfg.raster));
      fs.push_back(curriculum::LanePriorFrame(ep, t, cfg.raster));
      fs.push_back(curriculum::BoxPriorFrame(ep, t, cfg.raster));
      fs.push_back(curriculum::UnifiedCotFrame(ep, t, cfg.raster));
      for (const auto& f : fs) {
        const auto grid = codec::EncodeFrame(f, cb);
        if (grid.ids.size() != static_cast<size_t>(codec::kGridTokens)) ++bad_counts;
        const auto back = codec::DecodeTokens(grid, cb);
        for (size_t i = 0; i < f.pixels.size(); ++i) mismatches += back.pixels[i] != f.pixels[i] ? 1 : 0;
        ++frames;
      }
    }
  }
  const bool ok = frames >= 10000 && no_overflow && mismatches == 0 && bad_counts == 0 && codec::kGridTokens == 96;
  return {ok, std::to_string(frames) + " frames, " + std::to_string(mismatches) + " pixel mismatches, codebook " +
                  std::to_string(cb.size()) + "/" + std::to_string(cb.capacity()) + ", tokens per frame " +
                  std::to_string(codec::kGridTokens)};
}

// ---------------------------------------------------------------------------
// 3. Gradient check through the CLI

Outcome Gradcheck(const Context& ctx) {
  const auto r = RunProcess(Quote(ctx.cli) + " gradcheck");
  try {
    const auto j = json::parse(r.out);
    const double err = j.at("max_rel_error").get<double>();
    return {r.status == 0 && err < 1e-4,
            "max relative error " + std::to_string(err) + " (" + j.at("worst_tensor").get<std::string>() +
                "), exit " + std::to_string(r.status)};
  } catch (const std::exception& e) {
    return {false, std::string("unparseable gradcheck output: ") + e.what()};
  }
}

// ---------------------------------------------------------------------------
// 4. Memorizing a fixed corpus

Outcome Trainability() {
  model::ModelConfig c;
  c.vocab_size = codec::Vocab().size();
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.context_len = 32;
  Rng rng(2024);
  std::vector<std::vector<int>> seqs(32);
  std::vector<std::vector<uint8_t>> flags(32);
  for (int s = 0; s < 32; ++s) {
    seqs[s].push_back(s);
    for (int i = 1; i < 24; ++i) seqs[s].push_back(static_cast<int>(rng.Below(static_cast<uint64_t>(c.vocab_size))));
    flags[s].assign(seqs[s].size(), 1);
    flags[s][0] = 0;
  }
  const auto batch = model::MakeBatch(seqs, flags, 0);
  auto p = model::InitParams<float>(c, 11);
  auto opt = model::AdamState::For(p);
  model::Hyper h;
  h.lr = 3e-3;
  h.warmup_steps = 50;
  h.total_steps = 2000;
  double first = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const auto r = model::TrainStep(p, opt, batch, h);
    if (i == 0) first = r.loss;
  }
  const double final_loss = model::BatchLoss(p, batch);
  return {final_loss < 0.05, "masked loss " + Fmt(first) + " -> " + Fmt(final_loss, 5) + " after 2000 steps"};
}

// ---------------------------------------------------------------------------
// Ablation arms shared by criteria 5, 6 and 7.

struct Workspace {
  ExperimentConfig cfg;
  Dataset data;
  std::unique_ptr<Codec> codec;
  std::unique_ptr<RunManifest> manifest;
};

Workspace& Shared(const Context& ctx) {
  static std::unique_ptr<Workspace> ws;
  if (ws) return *ws;
  ws = std::make_unique<Workspace>();
  ws->cfg = ExperimentConfig::Load(ctx.config);
  ws->cfg.out_dir = (ctx.work / "ablation").string();
  ws->cfg.Validate();
  fs::create_directories(ws->cfg.out_dir);
  ws->manifest = std::make_unique<RunManifest>(fs::path(ws->cfg.out_dir) / "manifest.jsonl");
  const DataPaths paths{fs::path(ws->cfg.out_dir) / "data"};
  PrepareData(ws->cfg, paths, ws->manifest.get());
  ws->data = LoadDataset(paths);
  ws->codec = LoadCodec(paths, ws->cfg.raster);
  return *ws;
}

ExperimentConfig ArmConfig(const Workspace& ws, uint64_t seed, bool progressive, CotVariant variant) {
  ExperimentConfig c = ws.cfg;
  c.train_seed = seed;
  c.mixture.enabled[static_cast<int>(curriculum::Task::kProgressive)] = progressive;
  c.mixture.cot_variant = variant;
  return c;
}

struct SeedArms {
  metrics::MetricsReport scratch_st;      // no stage 1
  metrics::MetricsReport plain_st;        // stage 1 without progressive sequences
  metrics::MetricsReport progressive_st;  // stage 1 with progressive sequences
  metrics::MetricsReport progressive_none;
};

fs::path ProgressiveStCheckpoint(const Context& ctx, uint64_t seed) {
  auto& ws = Shared(ctx);
  const auto c = ArmConfig(ws, seed, true, CotVariant::kSt);
  const auto init = EnsurePretrained(c, ws.data, *ws.codec, ws.manifest.get());
  return EnsureFinetuned(c, ws.data, *ws.codec, init, ws.manifest.get());
}

SeedArms RunSeed(const Context& ctx, uint64_t seed) {
  auto& ws = Shared(ctx);
  SeedArms arms;
  const std::string tag = "seed" + std::to_string(seed);
  {
    const auto c = ArmConfig(ws, seed, true, CotVariant::kSt);
    const auto ck = EnsureFinetuned(c, ws.data, *ws.codec, std::nullopt, ws.manifest.get());
    arms.scratch_st = EvaluateArm(c, ws.data, *ws.codec, tag + "-scratch-st", ck, ws.manifest.get()).report;
  }
  {
    const auto c = ArmConfig(ws, seed, false, CotVariant::kSt);
    const auto init = EnsurePretrained(c, ws.data, *ws.codec, ws.manifest.get());
    const auto ck = EnsureFinetuned(c, ws.data, *ws.codec, init, ws.manifest.get());
    arms.plain_st = EvaluateArm(c, ws.data, *ws.codec, tag + "-plain-st", ck, ws.manifest.get()).report;
  }
  {
    const auto c = ArmConfig(ws, seed, true, CotVariant::kSt);
    const auto init = EnsurePretrained(c, ws.data, *ws.codec, ws.manifest.get());
    const auto st = EnsureFinetuned(c, ws.data, *ws.codec, init, ws.manifest.get());
    arms.progressive_st = EvaluateArm(c, ws.data, *ws.codec, tag + "-progressive-st", st, ws.manifest.get()).report;
    const auto cn = ArmConfig(ws, seed, true, CotVariant::kNone);
    const auto none = EnsureFinetuned(cn, ws.data, *ws.codec, init, ws.manifest.get());
    arms.progressive_none =
        EvaluateArm(cn, ws.data, *ws.codec, tag + "-progressive-none", none, ws.manifest.get()).report;
  }
  return arms;
}

const std::vector<SeedArms>& AllSeeds(const Context& ctx) {
  static std::vector<SeedArms> all;
  if (all.empty()) {
    for (uint64_t s : ctx.seeds) all.push_back(RunSeed(ctx, s));
  }
  return all;
}

// Strictly lower in at least two of three seeds and on the mean.
bool Direction(const std::vector<double>& better, const std::vector<double>& worse, std::string& detail) {
  int wins = 0;
  double mb = 0.0, mw = 0.0;
  for (size_t i = 0; i < better.size(); ++i) {
    wins += better[i] < worse[i] ? 1 : 0;
    mb += better[i] / better.size();
    mw += worse[i] / worse.size();
  }
  detail = std::to_string(wins) + "/" + std::to_string(better.size()) + " seeds, mean " + Fmt(mb, 3) + " vs " +
           Fmt(mw, 3);
  return wins >= 2 && mb < mw;
}

// ---------------------------------------------------------------------------
// 5. Constrained generation validity over 100 planned episodes

Outcome GrammarValidity(const Context& ctx) {
  auto& ws = Shared(ctx);
  const auto ck = LoadCheckpoint(ProgressiveStCheckpoint(ctx, ctx.seeds.front()));
  ExperimentConfig c = ws.cfg;
  c.eval_episodes = 100;
  c.eval_times = {5};
  EvalOptions o;
  o.variant = CotVariant::kSt;
  const auto out = Evaluate(c, ck.params, *ws.codec, ws.data.val, o);
  const auto& v = ws.codec->vocab;
  long cot = 0, cot_bad = 0, wp = 0, wp_bad = 0;
  for (const auto& p : out.plans) {
    cot += static_cast<long>(p.cot_tokens.size());
    cot_bad += p.cot_tokens.size() == static_cast<size_t>(codec::kGridTokens) ? 0 : 1;
    for (int t : p.cot_tokens) cot_bad += v.img().Contains(t) ? 0 : 1;
    wp += static_cast<long>(p.waypoint_tokens.size());
    wp_bad += p.waypoint_tokens.size() == 2u * world::kHorizon ? 0 : 1;
    for (size_t i = 0; i < p.waypoint_tokens.size(); ++i) {
      wp_bad += (i % 2 == 0 ? v.wpx() : v.wpy()).Contains(p.waypoint_tokens[i]) ? 0 : 1;
    }
  }
  const bool ok = out.plans.size() == 100 && cot_bad == 0 && wp_bad == 0 && out.grammar_errors == 0;
  return {ok, std::to_string(out.plans.size()) + " plans, " + std::to_string(cot) + " CoT tokens (" +
                  std::to_string(cot_bad) + " outside IMG), " + std::to_string(wp) + " waypoint tokens (" +
                  std::to_string(wp_bad) + " out of WPX/WPY order), grammar errors " +
                  std::to_string(out.grammar_errors)};
}

// ---------------------------------------------------------------------------
// 6. Spatio-temporal CoT lowers collisions

Outcome CotDirection(const Context& ctx) {
  std::vector<double> st, none, l2_st, l2_none;
  for (const auto& a : AllSeeds(ctx)) {
    st.push_back(a.progressive_st.collision.uniad.avg);
    none.push_back(a.progressive_none.collision.uniad.avg);
    l2_st.push_back(a.progressive_st.l2_uniad.avg);
    l2_none.push_back(a.progressive_none.l2_uniad.avg);
  }
  std::string detail;
  const bool ok = Direction(st, none, detail);
  std::ostringstream s;
  s << "collision uniad avg (%) st vs none: " << detail << "; per seed";
  for (size_t i = 0; i < st.size(); ++i) s << " [" << Fmt(st[i], 3) << " vs " << Fmt(none[i], 3) << "]";
  s << "; L2 avg (m) st " << Fmt((l2_st[0] + l2_st[1] + l2_st[2]) / 3, 3) << " vs none "
    << Fmt((l2_none[0] + l2_none[1] + l2_none[2]) / 3, 3);
  return {ok, s.str()};
}

// ---------------------------------------------------------------------------
// 7. Pre-training and progressive sequences lower FFD

Outcome FfdDirection(const Context& ctx) {
  std::vector<double> scratch, plain, progressive;
  for (const auto& a : AllSeeds(ctx)) {
    scratch.push_back(a.scratch_st.ffd.value_or(NAN));
    plain.push_back(a.plain_st.ffd.value_or(NAN));
    progressive.push_back(a.progressive_st.ffd.value_or(NAN));
  }
  std::string d1, d2;
  const bool pretrain_ok = Direction(plain, scratch, d1);
  const bool progressive_ok = Direction(progressive, plain, d2);
  std::ostringstream s;
  s << "FFD stage1 vs none: " << d1 << "; progressive vs plain: " << d2 << "; per seed (none/plain/progressive)";
  for (size_t i = 0; i < scratch.size(); ++i) {
    s << " [" << Fmt(scratch[i], 2) << "/" << Fmt(plain[i], 2) << "/" << Fmt(progressive[i], 2) << "]";
  }
  return {pretrain_ok && progressive_ok, s.str()};
}

// ---------------------------------------------------------------------------
// 8. Frechet distance properties

std::vector<std::vector<double>> GaussianSample(int n, int dim, double shift, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> xs(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(dim)));
  for (auto& x : xs) {
    for (int d = 0; d < dim; ++d) x[d] = shift + (d % 3 + 1) * rng.Normal();
  }
  return xs;
}

Outcome FfdProperties() {
  const ExperimentConfig cfg;
  const Dataset data = GenerateDataset(cfg.world, 60, 0, 99, 1);
  const auto cb = CodebookFromEpisodes(data.train, cfg.raster, codec::kDefaultCapacity);
  std::vector<raster::Frame> a, b;
  for (const auto& ep : data.train) {
    a.push_back(curriculum::FutureFrame(ep, 3, cfg.raster));
    b.push_back(curriculum::UnifiedCotFrame(ep, 6, cfg.raster));
  }
  const double self = metrics::Ffd(a, a, cb);
  const double ab = metrics::Ffd(a, b, cb), ba = metrics::Ffd(b, a, cb);

  metrics::GaussStats g1{1, {0.0}, {4.0}}, g2{1, {3.0}, {4.0}};
  const double analytic = metrics::FrechetDistance(g1, g2);

  const auto base = metrics::FitGaussian(GaussianSample(400, 8, 0.0, 5));
  std::vector<double> shifted;
  for (double shift : {0.0, 1.0, 2.0, 3.0}) {
    shifted.push_back(metrics::FrechetDistance(base, metrics::FitGaussian(GaussianSample(400, 8, shift, 6))));
  }
  bool monotone = true;
  for (size_t i = 1; i < shifted.size(); ++i) monotone = monotone && shifted[i] >= shifted[i - 1];

  const bool ok = self <= 1e-6 && std::abs(analytic - 9.0) <= 1e-9 && monotone && std::abs(ab - ba) <= 1e-6;
  char self_text[32];
  std::snprintf(self_text, sizeof(self_text), "%.3g", self);
  return {ok, std::string("self ") + self_text + ", 1-D shift 3 = " + Fmt(analytic, 12) + ", shifts 0..3 -> " +
                  Fmt(shifted[0], 2) + " " + Fmt(shifted[1], 2) + " " + Fmt(shifted[2], 2) + " " +
                  Fmt(shifted[3], 2) + ", |d(a,b)-d(b,a)| " + std::to_string(std::abs(ab - ba))};
}

// ---------------------------------------------------------------------------
// 9. End-to-end determinism through the CLI

Outcome Determinism(const Context& ctx) {
  const std::string overrides =
      " --quiet --set stage1.steps=120 --set stage2.steps=80 --set eval.episodes=50 --set run.out_dir=\\\"run\\\"";
  std::vector<std::string> hashes[2];
  const std::vector<std::string> files = {"run/data/train.jsonl", "run/data/val.jsonl",   "run/data/codebook.fscb",
                                          "run/data/vocab.json",  "run/ckpt/stage1.fsdk", "run/ckpt/stage2.fsdk",
                                          "run/reports/eval.json"};
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = ctx.work / (r == 0 ? "determinism_a" : "determinism_b");
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string base = "cd " + Quote(dir) + " && " + Quote(ctx.cli) + " ";
    const std::string cfg = " --config " + Quote(fs::absolute(ctx.config)) + overrides;
    const std::vector<std::string> steps = {
        "gen-data --out run/data" + cfg,
        "build-codebook --data run/data" + cfg,
        "pretrain" + cfg,
        "finetune --init run/ckpt/stage1.fsdk" + cfg,
        "eval --ckpt run/ckpt/stage2.fsdk" + cfg,
    };
    for (const auto& s : steps) {
      const auto res = RunProcess(base + s + " > /dev/null");
      if (res.status != 0) return {false, "run " + std::to_string(r) + " failed at: " + s};
    }
    for (const auto& f : files) hashes[r].push_back(HashBytes(io::ReadFile(dir / f)));
    std::vector<fs::path> shards;
    for (const auto& e : fs::directory_iterator(dir / "run" / "shards")) shards.push_back(e.path());
    std::sort(shards.begin(), shards.end());
    for (const auto& s : shards) hashes[r].push_back(s.filename().string() + ":" + HashBytes(io::ReadFile(s)));
  }
  int differing = 0;
  for (size_t i = 0; i < std::max(hashes[0].size(), hashes[1].size()); ++i) {
    differing += (i < hashes[0].size() && i < hashes[1].size() && hashes[0][i] == hashes[1][i]) ? 0 : 1;
  }
  return {differing == 0, std::to_string(hashes[0].size()) + " artifacts compared (episodes, codebook, vocab, " +
                              "shards, checkpoints, report), " + std::to_string(differing) + " differ"};
}

// ---------------------------------------------------------------------------
// 10. Collision checker vs a brute-force polygon oracle; trajectory replay

std::array<Vec2, 4> BoxCorners(Vec2 center, double heading, double length, double width) {
  const double c = std::cos(heading), s = std::sin(heading);
  std::array<Vec2, 4> out;
  const double hl = 0.5 * length, hw = 0.5 * width;
  const double lx[4] = {-hw, hw, hw, -hw}, ly[4] = {-hl, -hl, hl, hl};
  for (int i = 0; i < 4; ++i) out[i] = {center.x + c * lx[i] - s * ly[i], center.y + s * lx[i] + c * ly[i]};
  return out;
}

double Cross(Vec2 o, Vec2 a, Vec2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

bool SegmentsCross(Vec2 p1, Vec2 p2, Vec2 q1, Vec2 q2) {
  const double d1 = Cross(q1, q2, p1), d2 = Cross(q1, q2, p2), d3 = Cross(p1, p2, q1), d4 = Cross(p1, p2, q2);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

bool StrictlyInside(Vec2 p, const std::array<Vec2, 4>& poly) {
  bool pos = false, neg = false;
  for (int i = 0; i < 4; ++i) {
    const double c = Cross(poly[i], poly[(i + 1) % 4], p);
    if (c >= 0) pos = true;
    if (c <= 0) neg = true;
  }
  return !(pos && neg);
}

// Two convex quads overlap iff an edge pair crosses properly or one
// contains a vertex (or the centroid) of the other.
bool QuadsOverlap(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (SegmentsCross(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4])) return true;
    }
  }
  for (const auto& p : a) {
    if (StrictlyInside(p, b)) return true;
  }
  for (const auto& p : b) {
    if (StrictlyInside(p, a)) return true;
  }
  const Vec2 ca{(a[0].x + a[2].x) / 2, (a[0].y + a[2].y) / 2};
  const Vec2 cb{(b[0].x + b[2].x) / 2, (b[0].y + b[2].y) / 2};
  return StrictlyInside(ca, b) || StrictlyInside(cb, a);
}

std::array<bool, world::kHorizon> OracleCollisions(const world::ScenarioEpisode& ep, const world::Trajectory& traj,
                                                   int t) {
  std::array<bool, world::kHorizon> hit{};
  const auto& anchor = ep.timeline[static_cast<size_t>(t)].ego;
  double prev_x = 0.0, prev_y = 0.0, heading = 0.0;
  for (int k = 0; k < world::kHorizon; ++k) {
    const auto w = traj.waypoints[static_cast<size_t>(k)];
    const double dx = w.x - prev_x, dy = w.y - prev_y;
    // Direction of travel, zero along +y (forward).
    if (std::hypot(dx, dy) > 1e-6) heading = std::atan2(-dx, dy);
    prev_x = w.x;
    prev_y = w.y;
    const double ch = std::cos(anchor.heading), sh = std::sin(anchor.heading);
    const Vec2 center{anchor.x + ch * w.x - sh * w.y, anchor.y + sh * w.x + ch * w.y};
    const auto ego = BoxCorners(center, anchor.heading + heading, world::kEgoLength, world::kEgoWidth);
    for (const auto& a : ep.timeline[static_cast<size_t>(t + k + 1)].agents) {
      const auto box = a.Footprint(ep.layout);
      if (QuadsOverlap(ego, BoxCorners(box.center, box.heading, box.length, box.width))) {
        hit[static_cast<size_t>(k)] = true;
        break;
      }
    }
  }
  return hit;
}

Outcome SimulatorAgreement() {
  const world::WorldConfig wc;
  Rng rng(31337);
  int disagreements = 0, positives = 0, checks = 0, colliding = 0;
  double replay_err = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto ep = world::GenerateScene(MixSeed(4242, static_cast<uint64_t>(i)), wc);
    const int t = static_cast<int>(rng.Below(world::kNumStates - world::kHorizon));
    world::Trajectory traj = world::EgoFutureTrajectory(ep, t);
    // Perturb the ground truth so that a share of the scenarios collide.
    const double lateral = rng.Normal() * 3.0, forward = rng.Normal() * 6.0;
    for (int k = 0; k < world::kHorizon; ++k) {
      traj.waypoints[static_cast<size_t>(k)].x += lateral * (k + 1) / world::kHorizon + 0.3 * rng.Normal();
      traj.waypoints[static_cast<size_t>(k)].y += forward * (k + 1) / world::kHorizon + 0.5 * rng.Normal();
    }
    const auto got = world::CheckCollision(ep, traj, t).per_waypoint;
    const auto want = OracleCollisions(ep, traj, t);
    colliding += std::count(want.begin(), want.end(), true) > 0 ? 1 : 0;
    for (int k = 0; k < world::kHorizon; ++k) {
      disagreements += got[static_cast<size_t>(k)] != want[static_cast<size_t>(k)] ? 1 : 0;
      positives += want[static_cast<size_t>(k)] ? 1 : 0;
      ++checks;
    }

    // Replay the ego from the initial state under the recorded commands.
    world::WorldState s = ep.timeline.front();
    std::vector<world::WorldState> replay = {s};
    for (int k = 1; k < world::kNumStates; ++k) {
      s = world::StepDynamics(s, ep.layout, ep.commands[static_cast<size_t>(k - 1)]);
      replay.push_back(s);
    }
    for (int tt = 0; tt + world::kHorizon < world::kNumStates; ++tt) {
      const auto gt = world::EgoFutureTrajectory(ep, tt);
      const auto& anchor = replay[static_cast<size_t>(tt)].ego;
      for (int k = 0; k < world::kHorizon; ++k) {
        const auto& e = replay[static_cast<size_t>(tt + k + 1)].ego;
        const double c = std::cos(-anchor.heading), sn = std::sin(-anchor.heading);
        const double rx = e.x - anchor.x, ry = e.y - anchor.y;
        const double ex = c * rx - sn * ry, ey = sn * rx + c * ry;
        replay_err = std::max(replay_err, std::hypot(ex - gt.waypoints[static_cast<size_t>(k)].x,
                                                     ey - gt.waypoints[static_cast<size_t>(k)].y));
      }
    }
  }
  const bool ok = disagreements == 0 && replay_err <= 1e-9;
  return {ok, "1000 scenarios (" + std::to_string(colliding) + " colliding), " + std::to_string(checks) + " waypoint checks (" + std::to_string(positives) +
                  " collisions), " + std::to_string(disagreements) + " disagreements; max replay error " +
                  std::to_string(replay_err) + " m"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fsdrive acceptance suite"};
  Context ctx;
  std::string only;
  app.add_option("--cli", ctx.cli, "fsdrive binary")->required();
  app.add_option("--config", ctx.config, "acceptance experiment config")->required();
  app.add_option("--work", ctx.work, "working directory")->required();
  app.add_option("--only", only, "comma-separated criteria to run");
  app.add_option("--seeds", ctx.seeds, "training seeds for the ablation criteria");
  bool quiet = false;
  app.add_flag("--quiet", quiet, "no training progress on stderr");
  CLI11_PARSE(app, argc, argv);
  SetVerbose(!quiet);
  ctx.cli = fs::absolute(ctx.cli);
  ctx.config = fs::absolute(ctx.config);
  fs::create_directories(ctx.work);
  ctx.work = fs::absolute(ctx.work);

  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (!tok.empty()) selected.insert(std::stoi(tok));
  }
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, [] { return MetricArithmetic(); }},
      {2, [] { return CodecExactness(); }},
      {3, [&] { return Gradcheck(ctx); }},
      {4, [] { return Trainability(); }},
      {5, [&] { return GrammarValidity(ctx); }},
      {6, [&] { return CotDirection(ctx); }},
      {7, [&] { return FfdDirection(ctx); }},
      {8, [] { return FfdProperties(); }},
      {9, [&] { return Determinism(ctx); }},
      {10, [] { return SimulatorAgreement(); }},
  };
  std::vector<std::string> lines, heads;
  bool all = true;
  for (const auto& [id, fn] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char head[64];
    std::snprintf(head, sizeof(head), "criterion %2d: %s", id, o.pass ? "PASS" : "FAIL");
    heads.push_back(head);
    lines.push_back(std::string(head) + "  " + o.detail + "  (" + Fmt(secs, 1) + " s)");
    std::cout << lines.back() << std::endl;
    all = all && o.pass;
  }
  std::cout << "\nsummary\n";
  for (const auto& h : heads) std::cout << h << "\n";
  std::cout << (all ? "ALL PASS" : "SOME CRITERIA FAILED") << std::endl;
  return all ? 0 : 1;
}
