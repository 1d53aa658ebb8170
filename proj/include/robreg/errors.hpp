#pragma once

#include <stdexcept>
#include <string>

namespace robreg {

/// Shapes of two operands do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value outside an operation's domain (empty batch, k > n, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent layer chain, bad config key, unsupported combination.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation called on an object that is not ready (no cache, untrained model).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace robreg
