#ifndef ADVTPP_ERRORS_HPP_
#define ADVTPP_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace advtpp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Forward value outside an operation's domain (log of nonpositive, etc).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed or invariant-violating input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or parameters supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite losses, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace advtpp

#endif  // ADVTPP_ERRORS_HPP_
