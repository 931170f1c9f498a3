#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace corrosion {

enum class ErrorCode {
  UnreadableFile,
  UnsupportedFormat,
  ZeroDimension,
  IncompleteGrid,
  OverlappingGridUnsupported,
  LengthMismatch,
  InvalidSpec,
  IoFailure,
  EmptyManifest,
  BadFractions,
  ShapeMismatch,
  NonFiniteInput,
  NonFiniteGradient,
  NonFiniteLoss,
  DivergedImmediately,
  BadRange,
  StepOutOfRange,
  EmptyStream,
  EmptyPrediction,
  EmptyValidation,
  SingleClass,
  BadCheckpoint,
};

inline constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnreadableFile: return "UnreadableFile";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::ZeroDimension: return "ZeroDimension";
    case ErrorCode::IncompleteGrid: return "IncompleteGrid";
    case ErrorCode::OverlappingGridUnsupported: return "OverlappingGridUnsupported";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::EmptyManifest: return "EmptyManifest";
    case ErrorCode::BadFractions: return "BadFractions";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DivergedImmediately: return "DivergedImmediately";
    case ErrorCode::BadRange: return "BadRange";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::EmptyStream: return "EmptyStream";
    case ErrorCode::EmptyPrediction: return "EmptyPrediction";
    case ErrorCode::EmptyValidation: return "EmptyValidation";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
  }
  return "Unknown";
}

/// Every failure raised by the toolkit carries one of the codes above so the
/// CLI and the HTTP layer can map it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace corrosion
