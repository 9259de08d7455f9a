#pragma once

#include <stdexcept>
#include <string>

namespace rdc {

// Base of every error thrown by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing files, inconsistent datasets, checkpoint/manifest mismatch.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values reached a loss or a distance.
class NumericError : public Error {
 public:
  using Error::Error;
};

class RegionTooSmall : public Error {
 public:
  using Error::Error;
};

}  // namespace rdc
