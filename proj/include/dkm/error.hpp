#pragma once

#include <stdexcept>
#include <string>

namespace dkm {

/// Input that violates a documented contract (bad records, bad config,
/// unsorted endpoints, ...). Maps to CLI exit status 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A message or file that fails schema or invariant checks. `field_path`
/// names the offending field, e.g. "group_params.overall.knots".
class ProtocolError : public ValidationError {
 public:
  ProtocolError(std::string field_path, const std::string& what)
      : ValidationError(field_path + ": " + what), field_path_(std::move(field_path)) {}
  const std::string& field_path() const noexcept { return field_path_; }

 private:
  std::string field_path_;
};

/// Numerical failure: non-convergence, degenerate statistics, singular fits.
/// Maps to CLI exit status 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public NumericError {
 public:
  using NumericError::NumericError;
};

class IllConditionedFitError : public NumericError {
 public:
  using NumericError::NumericError;
};

class IntegrationError : public NumericError {
 public:
  IntegrationError(double abscissa, const std::string& what)
      : NumericError(what), abscissa_(abscissa) {}
  double abscissa() const noexcept { return abscissa_; }

 private:
  double abscissa_;
};

/// An event observed where the at-risk curve is below the support floor.
class TailSupportError : public NumericError {
 public:
  using NumericError::NumericError;
};

class ConvergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

class DegenerateStatisticError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace dkm
