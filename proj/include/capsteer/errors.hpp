#pragma once

#include <stdexcept>
#include <string>

namespace capsteer {

// Error taxonomy mapped to process exit codes by the CLI:
//   ConfigError/CapacityError -> 2 (usage or configuration)
//   FormatError               -> 3 (data or file format)
//   NumericError              -> 4 (non-finite value, numerical abort)
// ShapeError is a programming-contract violation surfaced as exit 2.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CapacityError : ConfigError {
  explicit CapacityError(const std::string& msg) : ConfigError(msg) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace capsteer
