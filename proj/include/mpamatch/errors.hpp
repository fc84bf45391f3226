#pragma once

#include <stdexcept>
#include <string>

namespace mpamatch {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor geometry does not match the contract of an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input values violate a precondition (non-finite, out of range, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration, unknown keys, unavailable adapters. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset layout, file or palette problem. CLI exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A loss component went non-finite during training. CLI exit code 4.
class NumericAbort : public Error {
 public:
  NumericAbort(std::string component, long step)
      : Error("non-finite loss component '" + component + "' at step " + std::to_string(step)),
        component_(std::move(component)),
        step_(step) {}

  const std::string& component() const { return component_; }
  long step() const { return step_; }

 private:
  std::string component_;
  long step_;
};

}  // namespace mpamatch
