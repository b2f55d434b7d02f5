#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace forge {

enum class ErrorKind {
  ZeroNorm,
  DimMismatch,
  Io,
  BadMagic,
  TruncatedData,
  BadPairing,
  LabelOutOfRange,
  NotADistribution,
  TooFewSamples,
  BadTarget,
  DegenerateData,
  DegenerateComponents,
  Misaligned,
  StaleCache,
  ShapeMismatch,
  EmptyUtterance,
  MissingUtterance,
  OneClassOnly,
  LengthMismatch,
  BadConfig,
  TooShort,
  BadFraction,
  BadId,
  DuplicateId,
  TruthAccessDenied,
};

std::string_view to_string(ErrorKind kind);

// Every failure in the library is reported as a forge::Error carrying a kind,
// so callers and tests can branch on the category without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const char* message) {
  if (!condition) fail(kind, message);
}

}  // namespace forge
