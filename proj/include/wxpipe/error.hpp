#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace wxpipe {

enum class ErrorCode {
  ChecksumMismatch,
  MalformedRecord,
  EmptyBatch,
  UnknownScenario,
  PartialHour,
  SensorReadFailure,
  UnknownStation,
  ZeroTimeDelta,
  ResistanceOutOfRange,
  EmptyWindow,
  InsufficientCounterSamples,
  ConstantSeries,
  ConstantTruth,
  LengthMismatch,
  ZeroVariance,
  TooFewRows,
  KExceedsN,
  FeatureMismatch,
  MissingInput,
  InvalidArgument,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::UnknownScenario: return "UnknownScenario";
    case ErrorCode::PartialHour: return "PartialHour";
    case ErrorCode::SensorReadFailure: return "SensorReadFailure";
    case ErrorCode::UnknownStation: return "UnknownStation";
    case ErrorCode::ZeroTimeDelta: return "ZeroTimeDelta";
    case ErrorCode::ResistanceOutOfRange: return "ResistanceOutOfRange";
    case ErrorCode::EmptyWindow: return "EmptyWindow";
    case ErrorCode::InsufficientCounterSamples: return "InsufficientCounterSamples";
    case ErrorCode::ConstantSeries: return "ConstantSeries";
    case ErrorCode::ConstantTruth: return "ConstantTruth";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::TooFewRows: return "TooFewRows";
    case ErrorCode::KExceedsN: return "KExceedsN";
    case ErrorCode::FeatureMismatch: return "FeatureMismatch";
    case ErrorCode::MissingInput: return "MissingInput";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), message_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// The description without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

}  // namespace wxpipe
