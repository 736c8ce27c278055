// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>

#include "fsdrive/error.hpp"

namespace fsd::io {

std::string ReadFile(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it into place.
void WriteFileAtomic(const std::filesystem::path& path, std::string_view bytes);

// Little-endian append/read helpers for the binary artifact formats.
class ByteWriter {
 public:
  void Bytes(const void* data, size_t n) {
    buf_.append(static_cast<const char*>(data), n);
  }
  void Str(std::string_view s) { buf_.append(s); }
  template <typename T>
  void Pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    Bytes(&v, sizeof(T));  // host is little-endian (checked at configure time)
  }
  const std::string& data() const { return buf_; }
  std::string Take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  void Bytes(void* out, size_t n) {
    FSD_CHECK(pos_ + n <= data_.size(), ErrorKind::kDecode,
              "unexpected end of file at byte " + std::to_string(pos_));
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string_view Str(size_t n) {
    FSD_CHECK(pos_ + n <= data_.size(), ErrorKind::kDecode,
              "unexpected end of file at byte " + std::to_string(pos_));
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T Pod() {
    T v;
    Bytes(&v, sizeof(T));
    return v;
  }
  void ExpectMagic(std::string_view magic) {
    auto got = Str(magic.size());
    FSD_CHECK(got == magic, ErrorKind::kDecode,
              "bad magic: expected " + std::string(magic));
  }
  size_t remaining() const { return data_.size() - pos_; }
  size_t position() const { return pos_; }

 private:
  std::string_view data_;
  size_t pos_ = 0;
};

}  // namespace fsd::io
