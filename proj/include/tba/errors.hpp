#pragma once

#include <stdexcept>
#include <string>

namespace tba {

// Bad user input: unknown keys, invalid values, malformed files. Maps to exit code 2
// at the command line.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Inconsistent data on disk (corrupt manifest, duplicate records).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tba
