#pragma once

#include <stdexcept>
#include <string>

namespace camalab {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition violated by a caller-supplied value.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf inputs or a forward pass that left the finite range.
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc {
  io_failure,
  malformed_header,
  blob_length_mismatch,
  inconsistent_manifest,
  non_finite_values,
};

const char* to_string(FormatErrc code);

/// On-disk container (sequence or trace directory) failed validation.
class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& detail)
      : Error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  FormatErrc code() const noexcept { return code_; }

 private:
  FormatErrc code_;
};

}  // namespace camalab
