#pragma once

#include <stdexcept>
#include <string>

namespace rml {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Misuse of the autodiff tape (bad handle, reuse after backward).
struct TapeError : std::runtime_error {
  explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rml
