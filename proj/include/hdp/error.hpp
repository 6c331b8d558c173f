#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hdp {

enum class ErrorKind {
  kMissingDonor,
  kInvalidArgument,
  kShapeMismatch,
  kLengthMismatch,
  kEmptyBatch,
  kNonFinite,
  kNonFiniteGradient,
  kVersionMismatch,
  kCorruptFile,
  kIOFailure,
  kDuplicateStage,
  kEmptySubset,
  kEmptyStage,
  kEmptyPool,
  kKTooLarge,
  kSingleClass,
  kIncompleteMatrix,
  kFrozenModel,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries one of the ErrorKind tags so
/// callers (and tests) can dispatch on the category without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace hdp
