#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace dkm {

/// One subject: follow-up time X = min(T, C), event indicator, optional
/// treatment arm, covariates and a positive weight.
struct SurvivalRecord {
  double time = 0.0;
  int event = 0;
  std::optional<int> arm;
  std::vector<double> covariates;
  double weight = 1.0;
};

/// Throws ValidationError naming the first offending record.
void validate_records(std::span<const SurvivalRecord> records);

/// Product-limit step curve. For a weighted fit `at_risk` and `events` hold
/// weight sums, otherwise integer counts stored as doubles.
struct StepCurve {
  std::vector<double> event_times;
  std::vector<double> survival;
  std::vector<double> at_risk;
  std::vector<double> events;
  std::size_t n_total = 0;
  double weight_total = 0.0;

  /// Right-continuous evaluation: product over event times <= t.
  double operator()(double t) const;
};

StepCurve km_fit(std::span<const SurvivalRecord> records);

/// Kaplan-Meier with d_j and n_j replaced by weight sums.
StepCurve km_fit_weighted(std::span<const SurvivalRecord> records);

/// Empirical (weighted) fraction of subjects with follow-up strictly beyond
/// each requested time.
std::vector<double> at_risk_fraction(std::span<const SurvivalRecord> records,
                                     std::span<const double> times, bool weighted = false);

/// Exponential Greenwood variance of log(-log S(t)). Throws
/// DegenerateStatisticError when S(t) is 0 or 1.
double greenwood_discrete(const StepCurve& curve, double t);

struct LogRankTest {
  double statistic = 0.0;
  double p_value = 1.0;
  double observed[2] = {0.0, 0.0};
  double expected[2] = {0.0, 0.0};
};

/// Two-sample log-rank test in the sum (O - E)^2 / E form, chi-square with
/// one degree of freedom. Records must carry arm 0 or 1.
LogRankTest logrank_discrete(std::span<const SurvivalRecord> records);

struct WeightedLogRankTest {
  /// L = sum_j (d_1j - d_j n_1j / n_j) / sum w, weighted counts.
  double statistic = 0.0;
  /// sum w^2 psi^2 / (sum w)^2 with psi the influence of each record on L.
  double variance = 0.0;
  double z = 0.0;
  double p_value = 1.0;
};

/// Weighted two-sample log-rank statistic standardised by its influence
/// variance; arm 1 is the treated group.
WeightedLogRankTest logrank_weighted_discrete(std::span<const SurvivalRecord> records);

}  // namespace dkm
