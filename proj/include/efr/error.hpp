#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace efr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite entries, zero-norm feature rows, non-positive temperatures.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Problem too large for an exhaustive routine.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// A scalar function returned a non-finite value while being probed.
class EvaluationError : public Error {
 public:
  EvaluationError(const std::string& what, std::ptrdiff_t coordinate)
      : Error(what), coordinate_(coordinate) {}

  std::ptrdiff_t coordinate() const noexcept { return coordinate_; }

 private:
  std::ptrdiff_t coordinate_;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, config or CSV input.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public FormatError {
 public:
  ConfigError(const std::string& what, std::string key)
      : FormatError(what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace efr
