#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace quanos {

/// Base for every domain error raised by the library. The CLI maps these to
/// exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class CorruptionError : public Error { using Error::Error; };
class PlanError : public Error { using Error::Error; };
class CalibrationError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

/// Malformed binary input. `offset` is the byte position where decoding
/// stopped making sense.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace quanos
