#pragma once

#include <stdexcept>
#include <string>

namespace dflow {

// Process exit codes used by the CLI.
enum class ExitCode : int {
  kSuccess = 0,
  kConfig = 1,
  kVerification = 2,
  kNumerical = 3,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Time (or another scalar) outside the domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Evaluation at a point where a rate or scheduler diverges.
class SingularityError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or incomplete configuration. Maps to exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Invalid argument to an operation (empty sample list, G < 2, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// API misuse such as backward() without a matching forward().
class UsageError : public Error {
 public:
  using Error::Error;
};

// Every cached sample gives zero weight to the observed transition.
class DegenerateWeightError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in an objective or gradient. Maps to exit code 3.
class NumericalAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace dflow
