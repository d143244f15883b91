#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace agd {

/// Root of the library's exception hierarchy.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (files, requests, datasets, configs).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Runtime failure that is not the caller's data: I/O, numeric blow-up.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

class ConfigError : public DataError {
 public:
  using DataError::DataError;
};

/// Weight-file decoding failures. Each cause carries its own code so callers
/// (and tests) can tell them apart.
class FormatError : public DataError {
 public:
  enum class Code { bad_magic, version_mismatch, bad_header, shape_mismatch, truncated, non_finite };

  FormatError(Code code, const std::string& what) : DataError(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

/// Index, token id or length outside the model / sequence bounds.
class RangeError : public DataError {
 public:
  using DataError::DataError;
};

/// A probability vector that is not a distribution.
class DistributionError : public DataError {
 public:
  using DataError::DataError;
};

/// Cache produced by another model, or never completed.
class StaleCacheError : public Error {
 public:
  using Error::Error;
};

class IoError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

/// Non-finite loss or activations. `step` is the training step, if any.
class NumericError : public RuntimeFailure {
 public:
  NumericError(const std::string& what, std::size_t step = 0) : RuntimeFailure(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Reply from a judge endpoint that does not follow the mandated format.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::string raw) : DataError(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

}  // namespace agd
