#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sicrn {

// Error taxonomy used across the library. Callers that reach the CLI map
// these onto process exit codes (argument/format -> 2, numeric -> 3).
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Misuse of an API contract (wrong tape, non-scalar loss, ...).
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

inline void require_arg(bool ok, const std::string& msg) {
  if (!ok) throw ArgumentError(msg);
}

inline void require_numeric(bool ok, const std::string& msg) {
  if (!ok) throw NumericError(msg);
}

inline void require_usage(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

}  // namespace sicrn
