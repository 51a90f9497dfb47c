#pragma once

#include <stdexcept>
#include <string>

namespace drpca {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel counts that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class PlacementError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file (bad magic, truncation, version mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint and data disagree on configuration or geometry.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace drpca
