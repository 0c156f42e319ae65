#pragma once

#include <stdexcept>
#include <string>

namespace evtrack {

enum class ErrorCode {
  InvalidArgument,
  BadMagic,
  Truncated,
  NonMonotonic,
  OutOfBounds,
  ParseError,
  UnsupportedVersion,
  ChecksumMismatch,
  StructureMismatch,
  ShapeMismatch,
  NonFinite,
  MissingParams,
  EmptyInput,
  Io,
};

const char* to_string(ErrorCode code);

/// Exception carrying a machine-readable error class. The CLI maps the class
/// onto process exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace evtrack
