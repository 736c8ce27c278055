// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fsd {

/// Broad failure classes. The CLI maps these onto exit codes.
enum class ErrorKind {
  kConfig,         // invalid configuration field
  kRange,          // horizon / index out of range
  kShape,          // size mismatch between aligned inputs
  kState,          // object not in a usable state (e.g. empty codebook)
  kDecode,         // malformed token or file payload
  kGrammar,        // token outside the range its slot allows
  kLexicon,        // character not representable in the text range
  kNumeric,        // non-finite value or non-PSD matrix
  kCapacity,       // sequence longer than the model context
  kSchedule,       // constrained sampling slot with nothing allowed
  kCompatibility,  // checkpoint / codec hash mismatch
  kDegenerate,     // empty mask, empty metric input
  kIo,             // filesystem failure
  kUsage,          // bad command-line usage
};

const char* ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void Fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

#define FSD_CHECK(cond, kind, msg)         \
  do {                                     \
    if (!(cond)) ::fsd::Fail((kind), (msg)); \
  } while (0)

}  // namespace fsd
