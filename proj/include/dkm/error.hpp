#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dkm {

enum class ErrorCode {
  kDimension,
  kParameter,
  kContract,
  kInsufficientData,
  kNumeric,
  kDivergence,
  kFormatBadMagic,
  kFormatVersion,
  kFormatTruncated,
  kFormatIndexRange,
  kFormatInvalidHeader,
  kFormatTrailingData,
  kIo,
  kConfig,
};

/// Stable machine-readable name, used as the error class printed by the CLI.
constexpr std::string_view error_class(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kParameter: return "parameter";
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kInsufficientData: return "insufficient_data";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kFormatBadMagic: return "format.bad_magic";
    case ErrorCode::kFormatVersion: return "format.version";
    case ErrorCode::kFormatTruncated: return "format.truncated";
    case ErrorCode::kFormatIndexRange: return "format.index_range";
    case ErrorCode::kFormatInvalidHeader: return "format.invalid_header";
    case ErrorCode::kFormatTrailingData: return "format.trailing_data";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace dkm
