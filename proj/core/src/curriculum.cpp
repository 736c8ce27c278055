// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/curriculum.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <nlohmann/json.hpp>

#include "fsdrive/error.hpp"
#include "fsdrive/io.hpp"

namespace fsd::curriculum {

namespace {

using codec::Special;

constexpr uint16_t kShardVersion = 1;
constexpr double kAheadRange = 40.0;      // forward visibility of the raster window
constexpr double kSideWindow = 10.0;      // lane occupancy half-window
constexpr double kPerceptionRange = 50.0;
constexpr int kPerceptionMaxAgents = 6;

constexpr std::array<const char*, kNumTasks> kTaskNames = {"vqa", "future", "lane", "box", "progressive", "plan"};

void CheckT(const world::ScenarioEpisode& ep, int t) {
  FSD_CHECK(t >= kFirstT && t + world::kHorizon < static_cast<int>(ep.timeline.size()), ErrorKind::kRange,
            "sample time t=" + std::to_string(t) + " needs one step of history and a full horizon");
}

class Builder {
 public:
  Builder(Task task, const codec::Vocab& vocab) : vocab_(vocab) { seq_.task = task; }

  void Add(Role role, const std::vector<int>& tokens, bool target) {
    const int begin = static_cast<int>(seq_.tokens.size());
    seq_.tokens.insert(seq_.tokens.end(), tokens.begin(), tokens.end());
    seq_.target.insert(seq_.target.end(), tokens.size(), target ? 1 : 0);
    seq_.spans.push_back({role, begin, static_cast<int>(seq_.tokens.size())});
  }
  void Add(Role role, Special s, bool target) { Add(role, std::vector<int>{vocab_.Token(s)}, target); }

  Sequence Take() { return std::move(seq_); }

 private:
  const codec::Vocab& vocab_;
  Sequence seq_;
};

std::vector<int> FrameTokens(const raster::Frame& frame, const Tokenizer& tok) {
  const auto grid = codec::EncodeFrame(frame, tok.codebook);
  std::vector<int> out;
  out.reserve(grid.ids.size());
  for (int id : grid.ids) out.push_back(tok.vocab.ImageToken(id));
  return out;
}

std::vector<int> ObsTokens(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok) {
  const auto obs = ObservationFrames(ep, t, tok.raster);
  auto a = FrameTokens(obs[0], tok);
  const auto b = FrameTokens(obs[1], tok);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// BOS TASK OBS SEP
void AddPrompt(Builder& b, Special task, const world::ScenarioEpisode& ep, int t, const Tokenizer& tok) {
  b.Add(Role::kPrompt, Special::kBos, false);
  b.Add(Role::kPrompt, task, false);
  b.Add(Role::kObs, ObsTokens(ep, t, tok), false);
  b.Add(Role::kSep, Special::kSep, false);
}

Sequence SingleFrameSeq(Task task, Special tag, Role role, const raster::Frame& target, const world::ScenarioEpisode& ep,
                        int t, const Tokenizer& tok) {
  Builder b(task, tok.vocab);
  AddPrompt(b, tag, ep, t, tok);
  b.Add(role, FrameTokens(target, tok), true);
  b.Add(Role::kEos, Special::kEos, true);
  return b.Take();
}

Special CommandToken(world::Command c) {
  switch (c) {
    case world::Command::kLeft:
      return Special::kCmdLeft;
    case world::Command::kRight:
      return Special::kCmdRight;
    default:
      return Special::kCmdKeep;
  }
}

const world::Agent* NearestAhead(const world::WorldState& s) {
  const world::Agent* best = nullptr;
  for (const auto& a : s.agents) {
    const double gap = a.s - s.ego.y;
    if (gap <= 0.0 || gap > kAheadRange) continue;
    if (best == nullptr || gap < best->s - s.ego.y) best = &a;
  }
  return best;
}

std::string LaneOccupancy(const world::ScenarioEpisode& ep, int t, int lane) {
  if (lane < 0 || lane >= ep.layout.num_lanes) return "no lane";
  const auto& s = ep.timeline[t];
  for (const auto& a : s.agents) {
    if (a.lane == lane && std::abs(a.s - s.ego.y) <= kSideWindow) return "yes";
  }
  return "no";
}

}  // namespace

const char* TaskName(Task task) { return kTaskNames[static_cast<int>(task)]; }

Task TaskFromName(std::string_view name) {
  for (int i = 0; i < kNumTasks; ++i) {
    if (name == kTaskNames[i]) return static_cast<Task>(i);
  }
  Fail(ErrorKind::kConfig, "unknown task '" + std::string(name) + "'");
}

const char* CotVariantName(CotVariant v) {
  switch (v) {
    case CotVariant::kNone:
      return "none";
    case CotVariant::kText:
      return "text";
    case CotVariant::kImgText:
      return "imgtxt";
    case CotVariant::kSt:
      return "st";
  }
  return "?";
}

CotVariant CotVariantFromName(std::string_view name) {
  for (auto v : {CotVariant::kNone, CotVariant::kText, CotVariant::kImgText, CotVariant::kSt}) {
    if (name == CotVariantName(v)) return v;
  }
  Fail(ErrorKind::kConfig, "unknown CoT variant '" + std::string(name) + "' (none|text|imgtxt|st)");
}

int Sequence::TargetCount() const { return static_cast<int>(std::count(target.begin(), target.end(), uint8_t{1})); }

const Span* Sequence::Find(Role role) const {
  for (const auto& s : spans) {
    if (s.role == role) return &s;
  }
  return nullptr;
}

std::array<raster::Frame, 2> ObservationFrames(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg) {
  CheckT(ep, t);
  const auto& prev = ep.timeline[t - 1];
  const auto& cur = ep.timeline[t];
  return {raster::RenderBev(prev, prev.ego, ep.layout, cfg), raster::RenderBev(cur, cur.ego, ep.layout, cfg)};
}

raster::Frame FutureFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg) {
  CheckT(ep, t);
  return raster::RenderBev(ep.timeline[t + world::kHorizon], ep.timeline[t].ego, ep.layout, cfg);
}

raster::Frame LanePriorFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg) {
  CheckT(ep, t);
  return raster::RenderPriorLane(ep.timeline[t + world::kHorizon], ep.timeline[t].ego, ep.layout, cfg);
}

raster::Frame BoxPriorFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg) {
  CheckT(ep, t);
  return raster::RenderPriorBoxes(ep.timeline[t + world::kHorizon], ep.timeline[t].ego, ep.layout, cfg);
}

raster::Frame UnifiedCotFrame(const world::ScenarioEpisode& ep, int t, const raster::RasterConfig& cfg) {
  return raster::ComposeUnifiedCot(FutureFrame(ep, t, cfg), LanePriorFrame(ep, t, cfg), BoxPriorFrame(ep, t, cfg));
}

// ---------------------------------------------------------------------------

std::string QuestionText(Question q) {
  switch (q) {
    case Question::kAgentsAhead:
      return "how many agents ahead?";
    case Question::kNearestDistance:
      return "how far is the nearest agent ahead?";
    case Question::kLeftLane:
      return "is the left lane occupied?";
    case Question::kRightLane:
      return "is the right lane occupied?";
    case Question::kEgoSpeed:
      return "what is the ego speed?";
    case Question::kCommand:
      return "what is the command?";
  }
  return "";
}

std::string DistanceBin(double meters) {
  const int lo = static_cast<int>(std::floor(meters / 5.0)) * 5;
  return std::to_string(lo) + "-" + std::to_string(lo + 5);
}

std::string AnswerQuestion(const world::ScenarioEpisode& ep, int t, Question q) {
  CheckT(ep, t);
  const auto& s = ep.timeline[t];
  switch (q) {
    case Question::kAgentsAhead: {
      int n = 0;
      for (const auto& a : s.agents) {
        const double gap = a.s - s.ego.y;
        if (gap > 0.0 && gap <= kAheadRange) ++n;
      }
      return std::to_string(n);
    }
    case Question::kNearestDistance: {
      const auto* a = NearestAhead(s);
      return a == nullptr ? "none" : DistanceBin(a->s - s.ego.y);
    }
    case Question::kLeftLane:
      return LaneOccupancy(ep, t, s.ego_lane - 1);
    case Question::kRightLane:
      return LaneOccupancy(ep, t, s.ego_lane + 1);
    case Question::kEgoSpeed: {
      const int lo = static_cast<int>(std::floor(s.ego.speed / 2.0)) * 2;
      return std::to_string(lo) + "-" + std::to_string(lo + 2) + " m/s";
    }
    case Question::kCommand: {
      std::string name = world::CommandName(world::NavigationCommand(ep, t));
      std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
      return name;
    }
  }
  return "";
}

QaPair SynthQa(const world::ScenarioEpisode& ep, int t, uint64_t seed) {
  Rng rng(seed);
  const auto kind = static_cast<Question>(rng.Below(kNumQuestions));
  return {kind, QuestionText(kind), AnswerQuestion(ep, t, kind)};
}

std::string PerceptionText(const world::ScenarioEpisode& ep, int t) {
  CheckT(ep, t);
  const auto& anchor = ep.timeline[t].ego;
  struct Seen {
    double dist;
    const world::Agent* agent;
  };
  std::vector<Seen> seen;
  for (const auto& a : ep.timeline[t + world::kHorizon].agents) {
    const double dist = world::ToEgoFrame(anchor, a.Position(ep.layout)).Norm();
    if (dist < kPerceptionRange) seen.push_back({dist, &a});
  }
  std::sort(seen.begin(), seen.end(), [](const Seen& a, const Seen& b) {
    return a.dist < b.dist || (a.dist == b.dist && a.agent->id < b.agent->id);
  });
  if (seen.size() > kPerceptionMaxAgents) seen.resize(kPerceptionMaxAgents);
  if (seen.empty()) return "no agents; ";
  std::string out;
  for (const auto& s : seen) {
    out += "agent " + std::to_string(s.agent->id) + " lane " + std::to_string(s.agent->lane) + " dist " +
           DistanceBin(s.dist) + "; ";
  }
  return out;
}

// ---------------------------------------------------------------------------

Sequence BuildVqaSeq(const world::ScenarioEpisode& ep, int t, const QaPair& qa, const Tokenizer& tok) {
  const auto q = tok.vocab.EncodeText(qa.question);
  const auto a = tok.vocab.EncodeText(qa.answer);
  Builder b(Task::kVqa, tok.vocab);
  AddPrompt(b, Special::kTaskVqa, ep, t, tok);
  b.Add(Role::kQuestion, q, false);
  b.Add(Role::kSep, Special::kSep, false);
  b.Add(Role::kAnswer, a, true);
  b.Add(Role::kEos, Special::kEos, true);
  return b.Take();
}

Sequence BuildFutureSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok) {
  return SingleFrameSeq(Task::kFuture, Special::kTaskFut, Role::kFuture, FutureFrame(ep, t, tok.raster), ep, t, tok);
}

Sequence BuildLaneSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok) {
  return SingleFrameSeq(Task::kLane, Special::kTaskLane, Role::kLane, LanePriorFrame(ep, t, tok.raster), ep, t, tok);
}

Sequence BuildBoxSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok) {
  return SingleFrameSeq(Task::kBox, Special::kTaskBox, Role::kBox, BoxPriorFrame(ep, t, tok.raster), ep, t, tok);
}

Sequence BuildProgressiveSeq(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok) {
  Builder b(Task::kProgressive, tok.vocab);
  AddPrompt(b, Special::kTaskProg, ep, t, tok);
  b.Add(Role::kLane, FrameTokens(LanePriorFrame(ep, t, tok.raster), tok), true);
  b.Add(Role::kSep, Special::kSep, true);
  b.Add(Role::kBox, FrameTokens(BoxPriorFrame(ep, t, tok.raster), tok), true);
  b.Add(Role::kSep, Special::kSep, true);
  b.Add(Role::kFuture, FrameTokens(FutureFrame(ep, t, tok.raster), tok), true);
  b.Add(Role::kEos, Special::kEos, true);
  return b.Take();
}

std::vector<int> PlanPromptPrefix(const world::ScenarioEpisode& ep, int t, const Tokenizer& tok) {
  Builder b(Task::kPlan, tok.vocab);
  AddPrompt(b, Special::kTaskPlan, ep, t, tok);
  return b.Take().tokens;
}

std::vector<int> PlanBridge(const world::ScenarioEpisode& ep, int t, world::Command command, bool ego_status,
                            const Tokenizer& tok) {
  const auto& v = tok.vocab;
  std::vector<int> out = {v.Token(Special::kSep), v.Token(CommandToken(command))};
  if (ego_status) {
    const auto& e = ep.timeline[t].ego;
    const auto st = codec::EncodeEgoStatus(e.speed, e.accel, tok.quant, v);
    out.push_back(v.Token(Special::kEgoOn));
    out.insert(out.end(), st.begin(), st.end());
  } else {
    out.push_back(v.Token(Special::kEgoOff));
  }
  out.push_back(v.Token(Special::kSep));
  return out;
}

std::vector<int> CotSpan(const world::ScenarioEpisode& ep, int t, CotVariant variant, const Tokenizer& tok) {
  const auto& v = tok.vocab;
  std::vector<int> out;
  auto append = [&out](const std::vector<int>& x) { out.insert(out.end(), x.begin(), x.end()); };
  switch (variant) {
    case CotVariant::kNone:
      out.push_back(v.Token(Special::kCotNone));
      break;
    case CotVariant::kText:
      out.push_back(v.Token(Special::kCotText));
      append(v.EncodeText(PerceptionText(ep, t)));
      break;
    case CotVariant::kImgText:
      out.push_back(v.Token(Special::kCotImgTxt));
      append(FrameTokens(FutureFrame(ep, t, tok.raster), tok));
      append(v.EncodeText(PerceptionText(ep, t)));
      break;
    case CotVariant::kSt:
      out.push_back(v.Token(Special::kCotSt));
      append(FrameTokens(UnifiedCotFrame(ep, t, tok.raster), tok));
      break;
  }
  return out;
}

Sequence BuildPlanSeq(const world::ScenarioEpisode& ep, int t, CotVariant variant, bool ego_status, const Tokenizer& tok) {
  Builder b(Task::kPlan, tok.vocab);
  AddPrompt(b, Special::kTaskPlan, ep, t, tok);
  const auto cot = CotSpan(ep, t, variant, tok);
  b.Add(Role::kPrompt, std::vector<int>{cot.front()}, false);
  if (cot.size() > 1) b.Add(Role::kCot, std::vector<int>(cot.begin() + 1, cot.end()), true);

  // Text chains end on the separator, so it is learned as their terminator.
  const bool text_cot = variant == CotVariant::kText || variant == CotVariant::kImgText;
  const auto bridge = PlanBridge(ep, t, world::NavigationCommand(ep, t), ego_status, tok);
  b.Add(Role::kSep, std::vector<int>{bridge.front()}, text_cot);
  b.Add(Role::kCmd, std::vector<int>{bridge[1]}, false);
  b.Add(Role::kEgo, std::vector<int>(bridge.begin() + 2, bridge.end() - 1), false);
  b.Add(Role::kSep, std::vector<int>{bridge.back()}, false);

  const auto wp = codec::EncodeWaypoints(world::EgoFutureTrajectory(ep, t), tok.quant, tok.vocab);
  b.Add(Role::kWaypoints, wp.tokens, true);
  b.Add(Role::kEos, Special::kEos, true);
  return b.Take();
}

// ---------------------------------------------------------------------------

std::array<double, kNumTasks> MixtureConfig::Weights(Stage stage) const {
  auto w = stage == Stage::kPretrain ? stage1 : stage2;
  if (stage == Stage::kFinetune && future_aux) w[static_cast<int>(Task::kFuture)] = future_aux_weight;
  double total = 0.0;
  for (int i = 0; i < kNumTasks; ++i) {
    FSD_CHECK(w[i] >= 0.0 && std::isfinite(w[i]), ErrorKind::kConfig,
              std::string("mixture weight for ") + kTaskNames[i] + " must be non-negative");
    if (!enabled[i]) w[i] = 0.0;
    total += w[i];
  }
  FSD_CHECK(total > 0.0, ErrorKind::kConfig,
            std::string("mixture for stage ") + std::to_string(static_cast<int>(stage)) + " has no enabled task");
  for (double& x : w) x /= total;
  return w;
}

std::string MixtureConfig::ToJson() const {
  nlohmann::ordered_json j;
  for (int i = 0; i < kNumTasks; ++i) {
    j["stage1"][kTaskNames[i]] = stage1[i];
    j["stage2"][kTaskNames[i]] = stage2[i];
    j["enabled"][kTaskNames[i]] = enabled[i];
  }
  j["cot_variant"] = CotVariantName(cot_variant);
  j["ego_status"] = ego_status;
  j["future_aux"] = future_aux;
  j["future_aux_weight"] = future_aux_weight;
  return j.dump();
}

MixtureConfig MixtureConfig::FromJson(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MixtureConfig c;
    for (int i = 0; i < kNumTasks; ++i) {
      c.stage1[i] = j.at("stage1").at(kTaskNames[i]);
      c.stage2[i] = j.at("stage2").at(kTaskNames[i]);
      c.enabled[i] = j.at("enabled").at(kTaskNames[i]);
    }
    c.cot_variant = CotVariantFromName(j.at("cot_variant").get<std::string>());
    c.ego_status = j.at("ego_status");
    c.future_aux = j.at("future_aux");
    c.future_aux_weight = j.at("future_aux_weight");
    return c;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kConfig, std::string("bad mixture config: ") + e.what());
  }
}

MixtureStream::MixtureStream(Stage stage, const MixtureConfig& cfg, const std::vector<world::ScenarioEpisode>& episodes,
                             const Tokenizer& tok, uint64_t seed)
    : stage_(stage), cfg_(cfg), weights_(cfg.Weights(stage)), episodes_(episodes), tok_(tok), rng_(seed) {
  FSD_CHECK(!episodes.empty(), ErrorKind::kConfig, "mixture stream needs at least one episode");
}

SampleRef MixtureStream::NextRef() {
  SampleRef r;
  r.task = static_cast<Task>(rng_.Categorical(weights_));
  r.episode = static_cast<int>(rng_.Below(episodes_.size()));
  r.t = kFirstT + static_cast<int>(rng_.Below(kLastT - kFirstT + 1));
  r.qa_seed = rng_.NextU64();
  return r;
}

Sequence MixtureStream::Next() {
  const SampleRef r = NextRef();
  return BuildSequence(r, episodes_[r.episode], cfg_, tok_);
}

std::vector<Sequence> MixtureStream::NextBatch(int batch_size) {
  std::vector<Sequence> out;
  out.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) out.push_back(Next());
  return out;
}

Sequence BuildSequence(const SampleRef& ref, const world::ScenarioEpisode& ep, const MixtureConfig& cfg,
                       const Tokenizer& tok) {
  switch (ref.task) {
    case Task::kVqa:
      return BuildVqaSeq(ep, ref.t, SynthQa(ep, ref.t, ref.qa_seed), tok);
    case Task::kFuture:
      return BuildFutureSeq(ep, ref.t, tok);
    case Task::kLane:
      return BuildLaneSeq(ep, ref.t, tok);
    case Task::kBox:
      return BuildBoxSeq(ep, ref.t, tok);
    case Task::kProgressive:
      return BuildProgressiveSeq(ep, ref.t, tok);
    case Task::kPlan:
      return BuildPlanSeq(ep, ref.t, cfg.cot_variant, cfg.ego_status, tok);
  }
  Fail(ErrorKind::kState, "unknown task");
}

model::Batch ToBatch(const std::vector<Sequence>& seqs, const codec::Vocab& vocab) {
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<uint8_t>> targets;
  for (const auto& s : seqs) {
    tokens.push_back(s.tokens);
    targets.push_back(s.target);
  }
  return model::MakeBatch(tokens, targets, vocab.Token(Special::kPad));
}

// ---------------------------------------------------------------------------

std::string SerializeShard(const std::vector<PackedRecord>& records) {
  io::ByteWriter w;
  w.Str("FSSQ");
  w.Pod<uint16_t>(kShardVersion);
  w.Pod<uint32_t>(static_cast<uint32_t>(records.size()));
  for (const auto& r : records) {
    FSD_CHECK(r.tokens.size() == r.target.size(), ErrorKind::kShape, "shard record flags misaligned");
    w.Pod<uint8_t>(static_cast<uint8_t>(r.task));
    w.Pod<uint32_t>(static_cast<uint32_t>(r.tokens.size()));
    for (int tkn : r.tokens) {
      FSD_CHECK(tkn >= 0 && tkn <= 0xFFFF, ErrorKind::kRange, "token id does not fit a shard record");
      w.Pod<uint16_t>(static_cast<uint16_t>(tkn));
    }
    std::vector<uint8_t> bits((r.target.size() + 7) / 8, 0);
    for (size_t i = 0; i < r.target.size(); ++i) {
      if (r.target[i]) bits[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
    }
    w.Bytes(bits.data(), bits.size());
  }
  return w.Take();
}

std::vector<PackedRecord> DeserializeShard(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.ExpectMagic("FSSQ");
  const auto version = r.Pod<uint16_t>();
  FSD_CHECK(version == kShardVersion, ErrorKind::kDecode, "unsupported shard version " + std::to_string(version));
  const auto count = r.Pod<uint32_t>();
  std::vector<PackedRecord> out;
  out.reserve(count);
  for (uint32_t k = 0; k < count; ++k) {
    PackedRecord rec;
    const auto task = r.Pod<uint8_t>();
    FSD_CHECK(task < kNumTasks, ErrorKind::kDecode, "bad task tag in shard record " + std::to_string(k));
    rec.task = static_cast<Task>(task);
    const auto len = r.Pod<uint32_t>();
    FSD_CHECK(len <= r.remaining() / 2, ErrorKind::kDecode, "shard record length exceeds file");
    rec.tokens.resize(len);
    for (auto& tkn : rec.tokens) tkn = r.Pod<uint16_t>();
    std::vector<uint8_t> bits((len + 7) / 8);
    r.Bytes(bits.data(), bits.size());
    rec.target.resize(len);
    for (size_t i = 0; i < len; ++i) rec.target[i] = (bits[i / 8] >> (i % 8)) & 1u;
    out.push_back(std::move(rec));
  }
  FSD_CHECK(r.remaining() == 0, ErrorKind::kDecode, "trailing bytes in shard");
  return out;
}

}  // namespace fsd::curriculum
