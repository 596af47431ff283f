#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "dkm/quadrature.hpp"
#include "dkm/spline.hpp"
#include "dkm/surv_core.hpp"

namespace dkm {

/// Integrals of hazard over at-risk stop where the at-risk curve first
/// drops below this floor; events observed below it cannot be absorbed.
inline constexpr double kSupportFloor = 1e-4;

/// Grid steps where the shifted survival rises by more than this are
/// counted as non-monotone (the shift is still applied unchanged).
inline constexpr double kNonMonotoneTolerance = 0.05;

struct UpdateBatch {
  std::vector<SurvivalRecord> records;
  /// Empty means unit weights.
  std::vector<double> weights;
};

struct UpdateDiagnostics {
  std::size_t updates = 0;
  std::size_t non_monotone = 0;
  double max_fit_rms = 0.0;

  void merge(const UpdateDiagnostics& other);
};

/// Influence of single records on one curve state, at a fixed set of
/// evaluation times. H(s) = int_0^s lambda/Y is integrated once, at the
/// evaluation times and at the follow-up times the caller announces.
class InfluenceEvaluator {
 public:
  InfluenceEvaluator(const CurveView& view, std::vector<double> eval_times,
                     std::span<const double> record_times, const IntegrationPolicy& policy);

  const std::vector<double>& eval_times() const { return eval_times_; }
  const std::vector<double>& survival() const { return survival_; }
  const std::vector<double>& at_risk() const { return at_risk_; }
  double support() const { return support_; }

  /// psi(t) = -S(t) [ D I(X <= t) / Y(X) - H(min(X, t)) ] at every
  /// evaluation time. Throws TailSupportError for an event where Y(X) is
  /// below kSupportFloor.
  void influence(const SurvivalRecord& record, std::span<double> out) const;
  std::vector<double> influence(const SurvivalRecord& record) const;

  /// H(s) for s clipped to the support.
  double cumulative_hazard_over_risk(double s) const;

 private:
  const CurveView& view_;
  IntegrationPolicy policy_;
  std::vector<double> eval_times_;
  std::vector<double> survival_;
  std::vector<double> at_risk_;
  std::vector<double> nodes_;
  std::vector<double> h_nodes_;
  double origin_ = 0.0;
  double support_ = 0.0;
};

/// Site-1 initializer: KM and at-risk fraction of `records` on the default
/// grid, clamped and fitted. Weighted fractions when `weighted` is set.
SplineParams fit_initial(std::span<const SurvivalRecord> records, std::span<const double> knots,
                         int degree, Link link, double t_max, bool weighted = false,
                         double* fit_rms = nullptr);

std::vector<double> influence_at(const SurvivalRecord& record, const SplineParams& params,
                                 std::span<const double> eval_times,
                                 const IntegrationPolicy& policy);

/// Shift-and-refit for k records sharing one curve state:
///   S_new = S + sum_i w_i psi_i / ((1/k) sum_i (W + w_1 + ... + w_i))
///   Y_new = (W Y + sum_i w_i I(X_i > t)) / (W + sum_i w_i)
/// where W is the weight already absorbed (n_cum in the unweighted case).
/// When `extra_times` is nonempty the influence of each record at those
/// times is written to `extra_influence` (one row per record).
struct BatchUpdateRequest {
  std::span<const SurvivalRecord> records;
  std::span<const double> weights;  // empty = unit weights
  double prior_weight = 0.0;
  std::span<const double> extra_times;
};

SplineParams apply_batch_update(const SplineParams& params, const BatchUpdateRequest& request,
                                const IntegrationPolicy& policy,
                                std::vector<std::vector<double>>* extra_influence = nullptr,
                                UpdateDiagnostics* diagnostics = nullptr);

SplineParams update_single(const SplineParams& params, const SurvivalRecord& record,
                           const IntegrationPolicy& policy,
                           UpdateDiagnostics* diagnostics = nullptr);

SplineParams update_batch(const SplineParams& params, const UpdateBatch& batch,
                          const IntegrationPolicy& policy,
                          UpdateDiagnostics* diagnostics = nullptr);

/// Returns the updated curve and the new running weight sum.
std::pair<SplineParams, double> update_weighted(const SplineParams& params,
                                                const SurvivalRecord& record, double weight,
                                                double cum_weight, const IntegrationPolicy& policy,
                                                UpdateDiagnostics* diagnostics = nullptr);

std::pair<SplineParams, double> update_weighted_batch(const SplineParams& params,
                                                      const UpdateBatch& batch, double cum_weight,
                                                      const IntegrationPolicy& policy,
                                                      UpdateDiagnostics* diagnostics = nullptr);

}  // namespace dkm
