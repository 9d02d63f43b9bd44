#pragma once

#include <stdexcept>
#include <string>

namespace softfem {

/// Bad input to a constructor or operation (precondition violated).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An iterative solve did not reach its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual, int step = -1)
      : std::runtime_error(what), residual_(residual), step_(step) {}
  double residual() const { return residual_; }
  int step() const { return step_; }

 private:
  double residual_;
  int step_;
};

/// The simulated state blew up (non-finite or beyond the divergence bound).
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int step)
      : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// A signal does not contain enough oscillation to estimate from.
class InsufficientData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure inside a brute-force reference computation (Newton, finite differences).
class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace softfem
