#pragma once

#include <stdexcept>
#include <string>

#include "mlma/precision.hpp"

MLMA_NAMESPACE_BEGIN

enum class ErrorCategory {
  Dimension = 2,
  Contract = 3,
  Numeric = 4,
  Parse = 5,
  Config = 6,
  Io = 7,
};

const char* category_name(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorCategory::Dimension, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorCategory::Contract, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(ErrorCategory::Parse, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

#define MLMA_EXPECT(cond, msg)                       \
  do {                                               \
    if (!(cond)) throw ::mlma::ContractError(msg);   \
  } while (0)

MLMA_NAMESPACE_END
