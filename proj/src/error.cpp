#include "paka/error.hpp"

namespace paka {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kDegenerateInput: return "DegenerateInput";
    case ErrorCode::kZeroRow: return "ZeroRow";
    case ErrorCode::kEmptyOrZeroMean: return "EmptyOrZeroMean";
    case ErrorCode::kInfeasibleConstraint: return "InfeasibleConstraint";
    case ErrorCode::kEmptyIntersection: return "EmptyIntersection";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kStaleCache: return "StaleCache";
    case ErrorCode::kStepOutOfRange: return "StepOutOfRange";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kKTooLarge: return "KTooLarge";
    case ErrorCode::kEmptyBank: return "EmptyBank";
    case ErrorCode::kDegenerateLabels: return "DegenerateLabels";
    case ErrorCode::kCorruptFile: return "CorruptFile";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace paka
