// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fsdrive/error.hpp"
#include "fsdrive/hash.hpp"
#include "fsdrive/io.hpp"

namespace fsd {

const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kState: return "state";
    case ErrorKind::kDecode: return "decode";
    case ErrorKind::kGrammar: return "grammar";
    case ErrorKind::kLexicon: return "lexicon";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kSchedule: return "schedule";
    case ErrorKind::kCompatibility: return "compatibility";
    case ErrorKind::kDegenerate: return "degenerate";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kUsage: return "usage";
  }
  return "unknown";
}

std::string Fnv1a::HexDigest() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(state_));
  return buf;
}

std::string HashBytes(std::string_view bytes) {
  Fnv1a h;
  h.Update(bytes);
  return h.HexDigest();
}

namespace io {

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  FSD_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFileAtomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    FSD_CHECK(out.good(), ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    FSD_CHECK(out.good(), ErrorKind::kIo, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  FSD_CHECK(!ec, ErrorKind::kIo, "rename failed for " + path.string() + ": " + ec.message());
}

}  // namespace io
}  // namespace fsd
