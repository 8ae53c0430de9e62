#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bayeslearn {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not conform to a primitive's signature.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An API was called in a way its contract forbids.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Numeric failure; cholesky reports the first non-positive pivot.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::ptrdiff_t pivot = -1)
      : Error(what), pivot_(pivot) {}
  std::ptrdiff_t pivot() const noexcept { return pivot_; }

 private:
  std::ptrdiff_t pivot_;
};

/// Input data is malformed (non-finite, ragged, constant column, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Operation requires an estimator state it does not have (e.g. unfitted).
class StateError : public Error {
 public:
  using Error::Error;
};

/// A saved model could not be read back.
class LoadError : public Error {
 public:
  LoadError(const std::string& field, const std::string& what)
      : Error("load failed [" + field + "]: " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Inference could not make progress.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(what + ": " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace bayeslearn
