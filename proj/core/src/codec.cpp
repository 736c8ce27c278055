// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/codec.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "fsdrive/error.hpp"
#include "fsdrive/hash.hpp"
#include "fsdrive/io.hpp"

namespace fsd::codec {

using raster::Frame;

namespace {

constexpr uint16_t kCodebookVersion = 1;

// Palette ids are < 8, so a 16-pixel patch packs into 48 bits.
uint64_t PackKey(const PatchKey& key) {
  uint64_t v = 0;
  for (uint8_t p : key) v = (v << 3) | (p & 7u);
  return v;
}

}  // namespace

Codebook::Codebook(int capacity) : capacity_(capacity) {
  FSD_CHECK(capacity > 0, ErrorKind::kConfig, "codec.k must be positive");
}

std::optional<int> Codebook::Find(const PatchKey& key) const {
  auto it = index_.find(PackKey(key));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Codebook::Nearest(const PatchKey& key) const {
  FSD_CHECK(!entries_.empty(), ErrorKind::kState, "codebook is empty");
  if (auto hit = Find(key)) return *hit;
  int best = 0, best_dist = kPatchPixels + 1;
  for (int id = 0; id < size(); ++id) {
    int dist = 0;
    for (int i = 0; i < kPatchPixels; ++i) dist += entries_[id][i] != key[i];
    if (dist < best_dist) {
      best_dist = dist;
      best = id;
    }
  }
  return best;
}

std::optional<int> Codebook::Add(const PatchKey& key) {
  if (size() >= capacity_) return std::nullopt;
  const uint64_t packed = PackKey(key);
  if (index_.count(packed)) return std::nullopt;
  const int id = size();
  entries_.push_back(key);
  index_.emplace(packed, id);
  return id;
}

std::string Codebook::Serialize() const {
  io::ByteWriter w;
  w.Str("FSCB");
  w.Pod<uint16_t>(kCodebookVersion);
  w.Pod<uint16_t>(kPatchSize);
  w.Pod<uint32_t>(static_cast<uint32_t>(capacity_));
  w.Pod<uint32_t>(static_cast<uint32_t>(entries_.size()));
  for (const auto& e : entries_) w.Bytes(e.data(), e.size());
  return w.Take();
}

Codebook Codebook::Deserialize(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.ExpectMagic("FSCB");
  const auto version = r.Pod<uint16_t>();
  FSD_CHECK(version == kCodebookVersion, ErrorKind::kDecode,
            "unsupported codebook version " + std::to_string(version));
  const auto p = r.Pod<uint16_t>();
  FSD_CHECK(p == kPatchSize, ErrorKind::kDecode, "codebook patch size must be 4");
  Codebook cb(static_cast<int>(r.Pod<uint32_t>()));
  const auto count = r.Pod<uint32_t>();
  FSD_CHECK(count <= static_cast<uint32_t>(cb.capacity()), ErrorKind::kDecode, "codebook overfull");
  for (uint32_t i = 0; i < count; ++i) {
    PatchKey key;
    r.Bytes(key.data(), key.size());
    for (uint8_t v : key) FSD_CHECK(v < raster::kNumPaletteIds, ErrorKind::kDecode, "bad palette id in codebook");
    FSD_CHECK(cb.Add(key).has_value(), ErrorKind::kDecode, "duplicate codebook entry");
  }
  FSD_CHECK(r.remaining() == 0, ErrorKind::kDecode, "trailing bytes in codebook file");
  return cb;
}

std::string Codebook::Hash() const { return HashBytes(Serialize()); }

PatchKey ExtractPatch(const Frame& frame, int grid_row, int grid_col) {
  PatchKey key;
  for (int dy = 0; dy < kPatchSize; ++dy) {
    for (int dx = 0; dx < kPatchSize; ++dx) {
      key[dy * kPatchSize + dx] = frame.At(grid_row * kPatchSize + dy, grid_col * kPatchSize + dx);
    }
  }
  return key;
}

Codebook BuildCodebook(std::span<const Frame> frames, int capacity) {
  Codebook cb(capacity);
  for (const Frame& f : frames) {
    for (int r = 0; r < f.height / kPatchSize; ++r) {
      for (int c = 0; c < f.width / kPatchSize; ++c) {
        if (cb.size() >= capacity) return cb;
        cb.Add(ExtractPatch(f, r, c));
      }
    }
  }
  return cb;
}

TokenGrid EncodeFrame(const Frame& frame, const Codebook& codebook) {
  FSD_CHECK(frame.width % kPatchSize == 0 && frame.height % kPatchSize == 0, ErrorKind::kShape,
            "frame dimensions must be divisible by the patch size");
  FSD_CHECK(codebook.size() > 0, ErrorKind::kState, "cannot encode with an empty codebook");
  TokenGrid grid;
  grid.ids.reserve(kGridTokens);
  for (int r = 0; r < frame.height / kPatchSize; ++r) {
    for (int c = 0; c < frame.width / kPatchSize; ++c) {
      grid.ids.push_back(codebook.Nearest(ExtractPatch(frame, r, c)));
    }
  }
  return grid;
}

Frame DecodeTokens(const TokenGrid& grid, const Codebook& codebook) {
  FSD_CHECK(grid.ids.size() == static_cast<size_t>(kGridTokens), ErrorKind::kShape,
            "token grid must hold 96 ids");
  Frame f;
  for (int i = 0; i < kGridTokens; ++i) {
    const int id = grid.ids[i];
    FSD_CHECK(id >= 0 && id < codebook.size(), ErrorKind::kDecode,
              "codebook id " + std::to_string(id) + " out of range at position " + std::to_string(i));
    const PatchKey& key = codebook.entry(id);
    const int r = i / kGridCols, c = i % kGridCols;
    for (int dy = 0; dy < kPatchSize; ++dy) {
      for (int dx = 0; dx < kPatchSize; ++dx) {
        f.At(r * kPatchSize + dy, c * kPatchSize + dx) = key[dy * kPatchSize + dx];
      }
    }
  }
  return f;
}

// ---------------------------------------------------------------------------

const char* SpecialName(Special s) {
  static const char* kNames[] = {"BOS",      "EOS",      "SEP",       "PAD",      "TASK_VQA",
                                 "TASK_FUT", "TASK_LANE", "TASK_BOX", "TASK_PROG", "TASK_PLAN",
                                 "CMD_KEEP", "CMD_LEFT", "CMD_RIGHT", "COT_NONE", "COT_TEXT",
                                 "COT_IMGTXT", "COT_ST", "EGO_ON",   "EGO_OFF"};
  const int i = static_cast<int>(s);
  return i >= 0 && i < static_cast<int>(Special::kCount) ? kNames[i] : "RESERVED";
}

Vocab::Vocab(int image_capacity) {
  FSD_CHECK(image_capacity > 0, ErrorKind::kConfig, "vocab image capacity must be positive");
  text_ = {0, kTextSize};
  special_ = {text_.end, text_.end + kSpecialSize};
  img_ = {special_.end, special_.end + image_capacity};
  wpx_ = {img_.end, img_.end + kWpxBins};
  wpy_ = {wpx_.end, wpx_.end + kWpyBins};
  egov_ = {wpy_.end, wpy_.end + kSpeedBins};
  egoa_ = {egov_.end, egov_.end + kAccelBins};
}

std::string_view Vocab::TextAlphabet() {
  // 63 characters; id 63 is reserved.
  static constexpr std::string_view kAlphabet =
      " abcdefghijklmnopqrstuvwxyz0123456789-.,;:?!'()/+=<>_#%&*\"@[]{}";
  static_assert(kAlphabet.size() <= kTextSize);
  return kAlphabet;
}

std::vector<int> Vocab::EncodeText(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  const auto alphabet = TextAlphabet();
  for (char ch : text) {
    const auto pos = alphabet.find(ch);
    FSD_CHECK(pos != std::string_view::npos, ErrorKind::kLexicon,
              std::string("character '") + ch + "' is not in the text vocabulary");
    out.push_back(text_.begin + static_cast<int>(pos));
  }
  return out;
}

std::string Vocab::DecodeText(std::span<const int> tokens) const {
  std::string out;
  const auto alphabet = TextAlphabet();
  for (int t : tokens) {
    const int i = t - text_.begin;
    FSD_CHECK(i >= 0 && i < static_cast<int>(alphabet.size()), ErrorKind::kDecode,
              "token " + std::to_string(t) + " is not a text token");
    out.push_back(alphabet[i]);
  }
  return out;
}

std::string Vocab::ToJson() const {
  using nlohmann::ordered_json;
  auto range = [](TokenRange r) { return ordered_json::array({r.begin, r.end}); };
  ordered_json specials = ordered_json::array();
  for (int i = 0; i < static_cast<int>(Special::kCount); ++i) specials.push_back(SpecialName(static_cast<Special>(i)));
  ordered_json j = {{"vocab_size", size()},
                    {"ranges",
                     {{"TEXT", range(text_)},
                      {"SPECIAL", range(special_)},
                      {"IMG", range(img_)},
                      {"WPX", range(wpx_)},
                      {"WPY", range(wpy_)},
                      {"EGOV", range(egov_)},
                      {"EGOA", range(egoa_)}}},
                    {"text_alphabet", std::string(TextAlphabet())},
                    {"special_tokens", specials}};
  return j.dump(2) + "\n";
}

Vocab Vocab::FromJson(std::string_view text) {
  try {
    auto j = nlohmann::json::parse(text);
    const auto img = j.at("ranges").at("IMG");
    Vocab v(img.at(1).get<int>() - img.at(0).get<int>());
    FSD_CHECK(v.ToJson() == nlohmann::ordered_json::parse(text).dump(2) + "\n", ErrorKind::kDecode,
              "vocab file does not match the fixed layout");
    return v;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kDecode, std::string("malformed vocab file: ") + e.what());
  }
}

std::string Vocab::Hash() const { return HashBytes(ToJson()); }

std::string DescribeToken(const Vocab& vocab, int token) {
  if (vocab.text().Contains(token)) {
    const auto a = Vocab::TextAlphabet();
    const int i = token - vocab.text().begin;
    return i < static_cast<int>(a.size()) ? "'" + std::string(1, a[i]) + "'" : "TEXT_RESERVED";
  }
  if (vocab.special().Contains(token)) return SpecialName(static_cast<Special>(token - vocab.special().begin));
  if (vocab.img().Contains(token)) return "IMG" + std::to_string(token - vocab.img().begin);
  if (vocab.wpx().Contains(token)) return "WPX" + std::to_string(token - vocab.wpx().begin);
  if (vocab.wpy().Contains(token)) return "WPY" + std::to_string(token - vocab.wpy().begin);
  if (vocab.egov().Contains(token)) return "EGOV" + std::to_string(token - vocab.egov().begin);
  if (vocab.egoa().Contains(token)) return "EGOA" + std::to_string(token - vocab.egoa().begin);
  return "INVALID" + std::to_string(token);
}

// ---------------------------------------------------------------------------

namespace {

int Bin(double v, double lo, double step, int bins, bool* clamped) {
  const long b = std::lround((v - lo) / step);
  if (b < 0 || b >= bins) *clamped = true;
  return static_cast<int>(std::clamp<long>(b, 0, bins - 1));
}

}  // namespace

WaypointTokens EncodeWaypoints(const world::Trajectory& traj, const QuantSpec& spec, const Vocab& vocab) {
  WaypointTokens out;
  for (const Vec2& w : traj.waypoints) {
    out.tokens.push_back(vocab.wpx().begin + Bin(w.x, spec.x_min, spec.x_step, Vocab::kWpxBins, &out.clamped));
    out.tokens.push_back(vocab.wpy().begin + Bin(w.y, spec.y_min, spec.y_step, Vocab::kWpyBins, &out.clamped));
  }
  return out;
}

world::Trajectory DecodeWaypoints(std::span<const int> tokens, const QuantSpec& spec, const Vocab& vocab) {
  FSD_CHECK(tokens.size() == 2 * world::kHorizon, ErrorKind::kGrammar,
            "waypoint span must hold 12 tokens, got " + std::to_string(tokens.size()));
  world::Trajectory traj;
  for (int k = 0; k < world::kHorizon; ++k) {
    const int tx = tokens[2 * k], ty = tokens[2 * k + 1];
    FSD_CHECK(vocab.wpx().Contains(tx), ErrorKind::kGrammar,
              "slot " + std::to_string(2 * k) + " expects WPX, got " + DescribeToken(vocab, tx));
    FSD_CHECK(vocab.wpy().Contains(ty), ErrorKind::kGrammar,
              "slot " + std::to_string(2 * k + 1) + " expects WPY, got " + DescribeToken(vocab, ty));
    traj.waypoints[k] = {spec.x_min + (tx - vocab.wpx().begin) * spec.x_step,
                         spec.y_min + (ty - vocab.wpy().begin) * spec.y_step};
  }
  return traj;
}

std::array<int, 2> EncodeEgoStatus(double speed, double accel, const QuantSpec& spec, const Vocab& vocab) {
  bool clamped = false;
  return {vocab.egov().begin + Bin(speed, spec.speed_min, spec.speed_step, Vocab::kSpeedBins, &clamped),
          vocab.egoa().begin + Bin(accel, spec.accel_min, spec.accel_step, Vocab::kAccelBins, &clamped)};
}

}  // namespace fsd::codec
