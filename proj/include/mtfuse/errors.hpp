#pragma once

#include <stdexcept>
#include <string>

namespace mtfuse {

// Root of every error the library raises. Each subclass maps onto one failure
// category so callers (and the CLI exit-code logic) can branch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes disagree with what an operation needs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A scalar argument is out of its domain (zero window, bad axis, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Configuration is malformed or violates an invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data (labels, sample contents) does not match the model.
class InputError : public Error {
 public:
  using Error::Error;
};

// A file could not be read or has a malformed header.
class LoadError : public Error {
 public:
  using Error::Error;
};

// A call was made before its prerequisites were satisfied.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// backward() was asked to differentiate a value that is not on the tape.
class EmptyTapeError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtfuse
