#pragma once

#include <stdexcept>
#include <string>

namespace seenfuse {

enum class ErrorCode {
  kInvalidRotation,
  kBehindCamera,
  kEmptySet,
  kNoObservation,
  kShapeMismatch,
  kEmptyMesh,
  kEmptyModel,
  kUndefinedRate,
  kNoReference,
  kReconstructionFailure,
  kDegenerateObservation,
  kInvalidPrevious,
  kInvalidK,
  kIngest,
  kConfig,
  kAlignment,
  kIo,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidRotation: return "invalid-rotation";
    case ErrorCode::kBehindCamera: return "behind-camera";
    case ErrorCode::kEmptySet: return "empty-set";
    case ErrorCode::kNoObservation: return "no-observation";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kEmptyMesh: return "empty-mesh";
    case ErrorCode::kEmptyModel: return "empty-model";
    case ErrorCode::kUndefinedRate: return "undefined-rate";
    case ErrorCode::kNoReference: return "no-reference";
    case ErrorCode::kReconstructionFailure: return "reconstruction-failure";
    case ErrorCode::kDegenerateObservation: return "degenerate-observation";
    case ErrorCode::kInvalidPrevious: return "invalid-previous";
    case ErrorCode::kInvalidK: return "invalid-k";
    case ErrorCode::kIngest: return "ingest";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kAlignment: return "alignment";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace seenfuse
