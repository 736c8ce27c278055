// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

// Discrete image tokens (patch dictionary), waypoint / ego-status bins and
// the unified vocabulary shared by text, control, image and waypoint tokens.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fsdrive/raster.hpp"
#include "fsdrive/world.hpp"

namespace fsd::codec {

inline constexpr int kPatchSize = 4;
inline constexpr int kPatchPixels = kPatchSize * kPatchSize;
inline constexpr int kGridRows = raster::kHeight / kPatchSize;  // 8
inline constexpr int kGridCols = raster::kWidth / kPatchSize;   // 12
inline constexpr int kGridTokens = kGridRows * kGridCols;       // 96
inline constexpr int kDefaultCapacity = 512;

using PatchKey = std::array<uint8_t, kPatchPixels>;

class Codebook {
 public:
  explicit Codebook(int capacity = kDefaultCapacity);

  int capacity() const { return capacity_; }
  int patch_size() const { return kPatchSize; }
  int size() const { return static_cast<int>(entries_.size()); }
  const PatchKey& entry(int id) const { return entries_.at(static_cast<size_t>(id)); }

  std::optional<int> Find(const PatchKey& key) const;
  /// Exact match if present, otherwise the entry at minimum Hamming distance
  /// (ties resolved to the lowest id).
  int Nearest(const PatchKey& key) const;
  /// Appends a new key; returns its id, or nullopt when full or present.
  std::optional<int> Add(const PatchKey& key);

  /// "FSCB" binary format.
  std::string Serialize() const;
  static Codebook Deserialize(std::string_view bytes);
  std::string Hash() const;

 private:
  int capacity_;
  std::vector<PatchKey> entries_;
  std::unordered_map<uint64_t, int> index_;
};

struct TokenGrid {
  std::vector<int> ids;  // kGridTokens codebook ids, raster order
};

PatchKey ExtractPatch(const raster::Frame& frame, int grid_row, int grid_col);

/// Distinct patches in first-seen scan order, truncated at `capacity`.
Codebook BuildCodebook(std::span<const raster::Frame> frames, int capacity = kDefaultCapacity);

TokenGrid EncodeFrame(const raster::Frame& frame, const Codebook& codebook);
raster::Frame DecodeTokens(const TokenGrid& grid, const Codebook& codebook);

// ---------------------------------------------------------------------------
// Unified vocabulary

struct TokenRange {
  int begin = 0;
  int end = 0;  // exclusive
  bool Contains(int id) const { return id >= begin && id < end; }
  int size() const { return end - begin; }
  friend bool operator==(TokenRange, TokenRange) = default;
};

enum class Special : int {
  kBos = 0,
  kEos,
  kSep,
  kPad,
  kTaskVqa,
  kTaskFut,
  kTaskLane,
  kTaskBox,
  kTaskProg,
  kTaskPlan,
  kCmdKeep,
  kCmdLeft,
  kCmdRight,
  kCotNone,
  kCotText,
  kCotImgTxt,
  kCotSt,
  kEgoOn,
  kEgoOff,
  kCount,
};

const char* SpecialName(Special s);

class Vocab {
 public:
  static constexpr int kTextSize = 64;
  static constexpr int kSpecialSize = 32;
  static constexpr int kWpxBins = 128;
  static constexpr int kWpyBins = 256;
  static constexpr int kSpeedBins = 32;
  static constexpr int kAccelBins = 32;

  explicit Vocab(int image_capacity = kDefaultCapacity);

  int size() const { return egoa_.end; }
  int image_capacity() const { return img_.size(); }

  TokenRange text() const { return text_; }
  /// Text ids that map to an alphabet character.
  TokenRange printable() const { return {text_.begin, text_.begin + static_cast<int>(TextAlphabet().size())}; }
  TokenRange special() const { return special_; }
  TokenRange img() const { return img_; }
  TokenRange wpx() const { return wpx_; }
  TokenRange wpy() const { return wpy_; }
  TokenRange egov() const { return egov_; }
  TokenRange egoa() const { return egoa_; }

  int Token(Special s) const { return special_.begin + static_cast<int>(s); }
  int ImageToken(int codebook_id) const { return img_.begin + codebook_id; }
  int CodebookId(int token) const { return token - img_.begin; }

  /// Characters representable in the text range, in id order.
  static std::string_view TextAlphabet();
  std::vector<int> EncodeText(std::string_view text) const;  // kLexicon on failure
  std::string DecodeText(std::span<const int> tokens) const;

  /// JSON description of the named ranges.
  std::string ToJson() const;
  static Vocab FromJson(std::string_view text);
  std::string Hash() const;

 private:
  TokenRange text_, special_, img_, wpx_, wpy_, egov_, egoa_;
};

/// Human-readable token name, used in transcripts and error messages.
std::string DescribeToken(const Vocab& vocab, int token);

// ---------------------------------------------------------------------------
// Waypoint and ego-status quantization

struct QuantSpec {
  double x_min = -8.0, x_step = 0.125;  // 128 lateral bins
  double y_min = 0.0, y_step = 0.25;    // 256 forward bins
  double speed_min = 0.0, speed_step = 1.0;
  double accel_min = -8.0, accel_step = 0.5;
};

struct WaypointTokens {
  std::vector<int> tokens;  // WPX, WPY per waypoint
  bool clamped = false;     // some coordinate fell outside the bin range
};

WaypointTokens EncodeWaypoints(const world::Trajectory& traj, const QuantSpec& spec, const Vocab& vocab);
/// Bin centers; kGrammar when a token lies outside the range of its slot.
world::Trajectory DecodeWaypoints(std::span<const int> tokens, const QuantSpec& spec, const Vocab& vocab);

/// Two tokens: speed bin then accel bin.
std::array<int, 2> EncodeEgoStatus(double speed, double accel, const QuantSpec& spec, const Vocab& vocab);

}  // namespace fsd::codec
