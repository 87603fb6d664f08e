#pragma once

#include <stdexcept>
#include <string>

namespace rnnafem {

// Bad input: dimensions, parameter ranges, malformed files.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Iterative solver or optimiser failed to produce a finite answer.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace rnnafem
