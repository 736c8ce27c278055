// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/planner.hpp"

#include <nlohmann/json.hpp>

#include "fsdrive/error.hpp"

namespace fsd::planner {

namespace {

using codec::Special;
using curriculum::CotVariant;

raster::Frame DecodeImage(const std::vector<int>& tokens, const curriculum::Tokenizer& tok) {
  codec::TokenGrid grid;
  for (int t : tokens) grid.ids.push_back(tok.vocab.CodebookId(t));
  return codec::DecodeTokens(grid, tok.codebook);
}

model::ConstraintSchedule ImageSchedule(const curriculum::Tokenizer& tok) {
  return model::ConstraintSchedule::Repeat(ImageRange(tok), codec::kGridTokens);
}

// Text slots may also close the span with SEP.
model::ConstraintSchedule TextSchedule(const curriculum::Tokenizer& tok) {
  const int sep = tok.vocab.Token(Special::kSep);
  model::ConstraintSchedule s;
  s.slots.assign(kMaxTextCot, model::Slot{{tok.vocab.printable(), {sep, sep + 1}}, sep});
  return s;
}

model::ConstraintSchedule WaypointSchedule(const curriculum::Tokenizer& tok) {
  model::ConstraintSchedule s;
  for (int k = 0; k < world::kHorizon; ++k) {
    s.slots.push_back({{tok.vocab.wpx()}, -1});
    s.slots.push_back({{tok.vocab.wpy()}, -1});
  }
  return s;
}

void CheckEmitted(const std::vector<int>& emitted, const model::ConstraintSchedule& schedule, const char* phase) {
  for (size_t i = 0; i < emitted.size(); ++i) {
    bool ok = false;
    for (const auto& r : schedule.slots[i].allowed) ok = ok || r.Contains(emitted[i]);
    FSD_CHECK(ok, ErrorKind::kState, std::string("internal: ") + phase + " slot " + std::to_string(i) + " violated");
  }
}

std::vector<int> Run(model::IncrementalDecoder& dec, const model::ConstraintSchedule& schedule,
                     const model::SampleOptions& options, Rng& rng, const char* phase) {
  auto out = model::GenerateConstrained(dec, schedule, options, rng);
  CheckEmitted(out, schedule, phase);
  return out;
}

}  // namespace

void CheckCompatibility(const model::CheckpointMeta& meta, const codec::Codebook& codebook, const codec::Vocab& vocab) {
  FSD_CHECK(meta.codebook_hash == codebook.Hash(), ErrorKind::kCompatibility,
            "codebook hash mismatch: checkpoint " + meta.codebook_hash + " vs loaded " + codebook.Hash());
  FSD_CHECK(meta.vocab_hash == vocab.Hash(), ErrorKind::kCompatibility,
            "vocab hash mismatch: checkpoint " + meta.vocab_hash + " vs loaded " + vocab.Hash());
}

codec::TokenRange ImageRange(const curriculum::Tokenizer& tok) {
  return {tok.vocab.img().begin, tok.vocab.img().begin + tok.codebook.size()};
}

PlanResult Plan(const model::Params<float>& params, const curriculum::Tokenizer& tok, const PlanRequest& req) {
  FSD_CHECK(req.episode != nullptr, ErrorKind::kState, "plan request has no episode");
  const auto& ep = *req.episode;
  const auto& v = tok.vocab;
  const model::SampleOptions options{req.mode, 5, 1.0, req.seed};
  Rng rng(req.seed);

  PlanResult res;
  res.t = req.t;
  res.variant = req.variant;

  model::IncrementalDecoder dec(params);
  dec.FeedAll(curriculum::PlanPromptPrefix(ep, req.t, tok));
  const auto gt_cot = curriculum::CotSpan(ep, req.t, req.variant, tok);
  dec.Feed(gt_cot.front());

  // Phase 1: the chain-of-thought span.
  bool sep_emitted = false;
  if (req.teacher_forced_cot) {
    dec.FeedAll(std::span<const int>(gt_cot).subspan(1));
    std::vector<int> text;
    for (size_t i = 1; i < gt_cot.size(); ++i) (v.img().Contains(gt_cot[i]) ? res.cot_tokens : text).push_back(gt_cot[i]);
    res.cot_text = v.DecodeText(text);
  } else {
    if (req.variant == CotVariant::kSt || req.variant == CotVariant::kImgText) {
      res.cot_tokens = Run(dec, ImageSchedule(tok), options, rng, "cot image");
    }
    if (req.variant == CotVariant::kText || req.variant == CotVariant::kImgText) {
      auto text = Run(dec, TextSchedule(tok), options, rng, "cot text");
      if (!text.empty() && text.back() == v.Token(Special::kSep)) {
        text.pop_back();
        sep_emitted = true;
      }
      res.cot_text = v.DecodeText(text);
    }
  }
  if (!res.cot_tokens.empty()) res.cot_frame = DecodeImage(res.cot_tokens, tok);

  // Command, ego status and the separators are given, not generated.
  const world::Command command = req.command.value_or(world::NavigationCommand(ep, req.t));
  const auto bridge = curriculum::PlanBridge(ep, req.t, command, req.ego_status, tok);
  dec.FeedAll(std::span<const int>(bridge).subspan(sep_emitted ? 1 : 0));

  // Phase 2: waypoints.
  const auto schedule = WaypointSchedule(tok);
  res.waypoint_tokens = Run(dec, schedule, options, rng, "waypoint");
  res.trajectory = codec::DecodeWaypoints(res.waypoint_tokens, tok.quant, v);
  for (int i = 0; i < static_cast<int>(res.waypoint_tokens.size()); ++i) {
    const auto& r = i % 2 == 0 ? v.wpx() : v.wpy();
    res.clamped = res.clamped || res.waypoint_tokens[i] == r.begin || res.waypoint_tokens[i] == r.end - 1;
  }
  res.transcript = dec.tokens();
  return res;
}

std::vector<PlanResult> PlanBatch(const model::Params<float>& params, const curriculum::Tokenizer& tok,
                                  const std::vector<PlanRequest>& requests) {
  std::vector<PlanResult> out;
  out.reserve(requests.size());
  for (size_t i = 0; i < requests.size(); ++i) {
    FSD_CHECK(requests[i].variant == requests.front().variant, ErrorKind::kConfig,
              "plan batch mixes CoT variants at request " + std::to_string(i));
    try {
      out.push_back(Plan(params, tok, requests[i]));
    } catch (const Error& e) {
      Fail(e.kind(), "request " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

std::string PlanResult::ToJson(const std::string& cot_ppm_path) const {
  nlohmann::ordered_json j;
  j["t"] = t;
  j["variant"] = curriculum::CotVariantName(variant);
  j["waypoints"] = nlohmann::ordered_json::array();
  for (const auto& w : trajectory.waypoints) j["waypoints"].push_back({w.x, w.y});
  if (!cot_ppm_path.empty()) j["cot_ppm_path"] = cot_ppm_path;
  if (!cot_text.empty()) j["cot_text"] = cot_text;
  j["transcript_len"] = transcript.size();
  j["clamped"] = clamped;
  return j.dump();
}

GeneratedFrames GenerateFrames(const model::Params<float>& params, const curriculum::Tokenizer& tok,
                               const world::ScenarioEpisode& ep, int t, curriculum::Task task,
                               const model::SampleOptions& options) {
  FSD_CHECK(task == curriculum::Task::kFuture || task == curriculum::Task::kProgressive, ErrorKind::kConfig,
            "frame generation supports the future and progressive tasks");
  const auto& v = tok.vocab;
  const auto prompt = task == curriculum::Task::kFuture ? curriculum::BuildFutureSeq(ep, t, tok)
                                                        : curriculum::BuildProgressiveSeq(ep, t, tok);
  const auto* obs = prompt.Find(curriculum::Role::kObs);
  model::IncrementalDecoder dec(params);
  dec.FeedAll(std::span<const int>(prompt.tokens).first(obs->end + 1));  // through the SEP after OBS
  Rng rng(options.seed);
  const auto schedule = ImageSchedule(tok);
  GeneratedFrames out;
  if (task == curriculum::Task::kProgressive) {
    out.lane = DecodeImage(Run(dec, schedule, options, rng, "lane"), tok);
    dec.Feed(v.Token(Special::kSep));
    out.boxes = DecodeImage(Run(dec, schedule, options, rng, "box"), tok);
    dec.Feed(v.Token(Special::kSep));
  }
  out.future = DecodeImage(Run(dec, schedule, options, rng, "future"), tok);
  return out;
}

}  // namespace fsd::planner
