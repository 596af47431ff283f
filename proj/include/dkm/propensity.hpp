#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dkm/surv_core.hpp"

namespace dkm {

inline constexpr double kPropensityFloor = 0.01;
inline constexpr double kPropensityCeiling = 0.99;

/// Logistic propensity model P(A = 1 | Z) = expit(coef' (1, Z)) with the
/// information matrix accumulated over all sites seen so far.
struct PropensityState {
  std::vector<double> coef;
  /// Row-major (p + 1) x (p + 1).
  std::vector<double> cum_info;
  std::int64_t n_cum = 0;

  std::size_t dimension() const { return coef.size(); }
  Eigen::MatrixXd info_matrix() const;
  /// Throws ProtocolError with a field path relative to `prefix`.
  void validate(const std::string& prefix = "") const;
  friend bool operator==(const PropensityState&, const PropensityState&) = default;
};

struct NewtonOptions {
  double score_tol = 1e-8;
  int max_iter = 50;
  /// Coefficients beyond this magnitude are taken as separation.
  double max_abs_coef = 25.0;
};

/// Logistic MLE on one site's records by Newton-Raphson.
PropensityState propensity_init(std::span<const SurvivalRecord> records,
                                const NewtonOptions& options = {});

/// Renewable step: solves J_prev (b_prev - b) + U_site(b) = 0 and adds the
/// site information at the solution.
PropensityState propensity_update(const PropensityState& state,
                                  std::span<const SurvivalRecord> records,
                                  const NewtonOptions& options = {});

/// Pooled logistic MLE (used as an oracle).
std::vector<double> logistic_mle(std::span<const SurvivalRecord> records,
                                 const NewtonOptions& options = {});

double propensity_score(const PropensityState& state, const SurvivalRecord& record);

struct WeightResult {
  std::vector<double> weights;
  std::vector<double> propensity;
  std::size_t clamped = 0;
};

/// 1/p for treated and 1/(1-p) for controls, p clamped to [0.01, 0.99].
WeightResult weights_for(std::span<const SurvivalRecord> records, const PropensityState& state);

}  // namespace dkm
