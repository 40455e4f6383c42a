#pragma once

#include <stdexcept>
#include <string>

namespace afq {

/// Operand shapes do not agree for the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Matrix is singular at working precision. Carries the offending pivot.
class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, double pivot)
      : std::runtime_error(what), pivot_(pivot) {}

  double pivot() const noexcept { return pivot_; }

 private:
  double pivot_;
};

/// Invalid configuration or parameter values (bad bits, bad placements, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A graph leaf was referenced but never bound.
class UnboundLeafError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Optimization produced a non-finite loss or hit a singular effective matrix.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace afq
