#pragma once

#include <stdexcept>
#include <string>

namespace constellation {

/// Invalid or inconsistent configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between tensors or slot layouts.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input outside the domain an operation is defined on.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A scene holds more objects than there are slots.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Malformed, truncated or incompatible files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or infinity showed up where finite numbers are required.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fill-in found no feature that the learned mask keeps.
class AbstractionFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace constellation
