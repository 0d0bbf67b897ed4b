#pragma once

#include <stdexcept>
#include <string>

namespace uqss {

/// Base error for everything the library reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: arguments, config values, file schemas. The CLI maps this to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace uqss
