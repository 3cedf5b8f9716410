#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cor {

/// Base of every error raised by the library. The CLI maps subclasses to
/// exit codes: NumericError -> 3, everything else -> 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not agree for the requested kernel.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Token ids, targets or layer indices outside their valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A kernel produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, plan or report file. Carries the byte offset and
/// manifest field where the problem was detected when known.
class FormatError : public Error {
 public:
  FormatError(const std::string& message, std::uint64_t offset = 0, std::string field = {})
      : Error(describe(message, offset, field)), offset_(offset), field_(std::move(field)) {}

  std::uint64_t offset() const noexcept { return offset_; }
  const std::string& field() const noexcept { return field_; }

 private:
  static std::string describe(const std::string& message, std::uint64_t offset, const std::string& field) {
    std::string out = message + " (offset " + std::to_string(offset);
    if (!field.empty()) out += ", field '" + field + "'";
    return out + ")";
  }

  std::uint64_t offset_;
  std::string field_;
};

/// Removing an expert would leave a token with no active experts.
class AblationDegenerateError : public Error {
 public:
  using Error::Error;
};

/// Rescue gain requested for an expert that was not in the factual active set.
class NotActivatedError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class StratificationError : public Error {
 public:
  using Error::Error;
};

/// Budget bounds that cannot sum to the requested total.
class AllocationError : public Error {
 public:
  using Error::Error;
};

}  // namespace cor
