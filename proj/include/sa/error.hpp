#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sa {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape of an operand does not match what the operation requires.
struct DimensionError : Error {
  using Error::Error;
};

// A scalar argument is outside its legal range.
struct ArgumentError : Error {
  using Error::Error;
};

// An index (class label, patch position, ...) is out of bounds.
struct IndexError : Error {
  using Error::Error;
};

// An experiment or model configuration violates a precondition.
struct ConfigError : Error {
  using Error::Error;
};

// Training produced a non-finite loss or otherwise diverged.
struct TrainingError : Error {
  using Error::Error;
};

// A session peer violated the protocol state machine or message contract.
struct ProtocolError : Error {
  using Error::Error;
};

// Malformed bytes on the wire; `offset` is where parsing failed.
struct DecodeError : Error {
  size_t offset;
  DecodeError(const std::string& msg, size_t off)
      : Error(msg + " (byte offset " + std::to_string(off) + ")"), offset(off) {}
};

// Malformed container file; `offset` is where the check failed.
struct FormatError : Error {
  size_t offset;
  FormatError(const std::string& msg, size_t off)
      : Error(msg + " (byte offset " + std::to_string(off) + ")"), offset(off) {}
};

}  // namespace sa
