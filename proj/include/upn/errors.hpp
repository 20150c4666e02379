#pragma once

#include <stdexcept>
#include <string>

namespace upn {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
  using Error::Error;
};

class DomainError : public Error {
public:
  using Error::Error;
};

class NumericalError : public Error {
public:
  using Error::Error;
};

// Raised when a matrix is not positive definite.
class FactorizationError : public NumericalError {
public:
  using NumericalError::NumericalError;
};

// Integration failure. `last_good_time` is the last time at which the state
// was finite.
class DivergenceError : public NumericalError {
public:
  DivergenceError(const std::string& what, double last_good_time)
      : NumericalError(what), last_good_time_(last_good_time) {}
  double last_good_time() const noexcept { return last_good_time_; }

private:
  double last_good_time_;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class ParseError : public ConfigError {
public:
  ParseError(const std::string& what, std::size_t line)
      : ConfigError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

class IoError : public Error {
public:
  using Error::Error;
};

namespace detail {

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

}  // namespace detail

}  // namespace upn
