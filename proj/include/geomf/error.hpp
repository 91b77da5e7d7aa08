#pragma once

#include <stdexcept>
#include <string>

namespace geomf {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A tensor has the wrong rank or extent for its role (e.g. non-scalar loss).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Axis or element index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Division by zero, non-finite gradient or loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A domain object violates its invariants (non-orthogonal rotation, bad system).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (dataset, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// An operation is undefined for the model's symmetry mode.
class ModeError : public Error {
 public:
  using Error::Error;
};

}  // namespace geomf
