#pragma once

#include <stdexcept>
#include <string>

namespace wpl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UnboundNodeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class KeyError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (bad magic, truncation, inconsistent counts).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Matrix too ill-conditioned for the requested operation.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

/// Integration grid does not contain the integrand mass.
class GridError : public Error {
 public:
  using Error::Error;
};

}  // namespace wpl
