#ifndef DFN_ERRORS_HPP_
#define DFN_ERRORS_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dfn {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes are incompatible (names the offending axes in the message).
struct DimensionError : Error {
  using Error::Error;
};

// A structurally invalid configuration: non-integral conv output size,
// zero upsample factor, input size not divisible by the stage stride, ...
struct ConfigError : Error {
  using Error::Error;
};

// Invalid data content, e.g. a label id outside [0, K).
struct DataError : Error {
  using Error::Error;
};

// Too few elements to compute batch statistics.
struct StatisticsError : Error {
  using Error::Error;
};

// Malformed or truncated file. Carries the byte offset where parsing failed.
struct FormatError : Error {
  FormatError(const std::string& what, std::uint64_t byte_offset)
      : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::uint64_t offset;
};

// API misuse: backward on a non-scalar, iter past max_iter, mismatched
// evaluation inputs.
struct UsageError : Error {
  using Error::Error;
};

// Training diverged (NaN/Inf loss).
struct NumericError : Error {
  using Error::Error;
};

// Internal-consistency violation, e.g. an optimizer step on a parameter
// whose gradient was never populated.
struct InternalError : Error {
  using Error::Error;
};

}  // namespace dfn

#endif  // DFN_ERRORS_HPP_
