#pragma once

#include <stdexcept>
#include <string>

namespace tsrm {

// Base of every error the library throws. The CLI maps the subclasses onto
// stable exit codes (config -> 1, data -> 2, numeric -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace tsrm
