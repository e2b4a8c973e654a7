#pragma once

#include <stdexcept>
#include <string>

namespace cogdist {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (bad record length, magic number, header).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Tensor or table dimensions that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A violated precondition on an argument value.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration. `field` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// An optimization produced non-finite values.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace cogdist
