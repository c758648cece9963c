#pragma once

#include <stdexcept>
#include <string>

namespace samsel {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (non-finite values, dimension mismatch, bad rows).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A configuration or tuning parameter is outside its valid range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A basis cannot be constructed from the given covariate.
class BasisError : public Error {
 public:
  using Error::Error;
};

/// A term specification is inconsistent with the bases supplied for it.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// A linear system is singular or a factorization failed.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A diagnostic statistic is undefined for the given input.
class DiagnosticError : public Error {
 public:
  using Error::Error;
};

}  // namespace samsel
