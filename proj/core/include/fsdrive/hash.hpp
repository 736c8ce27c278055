// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace fsd {

// 64-bit FNV-1a. Used for content hashes of artifacts, not for security.
class Fnv1a {
 public:
  void Update(std::span<const uint8_t> bytes) {
    for (uint8_t b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001B3ULL;
    }
  }
  void Update(std::string_view s) {
    Update({reinterpret_cast<const uint8_t*>(s.data()), s.size()});
  }
  uint64_t Digest() const { return state_; }
  std::string HexDigest() const;

 private:
  uint64_t state_ = 0xCBF29CE484222325ULL;
};

std::string HashBytes(std::string_view bytes);

}  // namespace fsd
