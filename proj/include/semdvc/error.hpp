#pragma once

#include <stdexcept>
#include <string>

namespace semdvc {

enum class ErrorKind {
  kMissingFile,
  kBadMagic,
  kTruncated,
  kMalformed,
  kValidation,
  kDimensionMismatch,
  kInvalidArgument,
  kOutOfRange,
  kMissingArtifact,
  kIo,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; callers switch on kind() when the
// distinction matters (e.g. truncated payload vs bad magic).
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace semdvc
