#pragma once

#include <stdexcept>
#include <string>

namespace tprop {

// Error hierarchy. Every failure raised by the library derives from Error so
// callers (the CLI in particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its legal range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// An iterative routine did not converge, or a value went non-finite.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// An operation was asked for on a layer kind that cannot support it
/// (e.g. the derivative of the step function).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment / layer configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset files missing or malformed.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or other artifact has an unexpected layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace tprop
