#pragma once

#include <stdexcept>
#include <string>

namespace oslo {

// Inconsistent dimensions, impossible settings, missing configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied an invalid value (empty list, out-of-range number, unknown name).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A file on disk does not match the expected layout or schema version.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A remote generative service failed after all retries.
class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace oslo
