#include "hdp/error.hpp"

namespace hdp {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMissingDonor: return "MissingDonor";
    case ErrorKind::kInvalidArgument: return "InvalidArgument";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kLengthMismatch: return "LengthMismatch";
    case ErrorKind::kEmptyBatch: return "EmptyBatch";
    case ErrorKind::kNonFinite: return "NonFinite";
    case ErrorKind::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::kVersionMismatch: return "VersionMismatch";
    case ErrorKind::kCorruptFile: return "CorruptFile";
    case ErrorKind::kIOFailure: return "IOFailure";
    case ErrorKind::kDuplicateStage: return "DuplicateStage";
    case ErrorKind::kEmptySubset: return "EmptySubset";
    case ErrorKind::kEmptyStage: return "EmptyStage";
    case ErrorKind::kEmptyPool: return "EmptyPool";
    case ErrorKind::kKTooLarge: return "KTooLarge";
    case ErrorKind::kSingleClass: return "SingleClass";
    case ErrorKind::kIncompleteMatrix: return "IncompleteMatrix";
    case ErrorKind::kFrozenModel: return "FrozenModel";
  }
  return "Unknown";
}

}  // namespace hdp
