#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dkm/quadrature.hpp"
#include "dkm/spline.hpp"
#include "dkm/surv_core.hpp"

namespace dkm {

enum class Group : std::size_t { arm0 = 0, arm1 = 1, overall = 2 };
inline constexpr std::size_t kGroupCount = 3;
inline constexpr std::array<Group, kGroupCount> kAllGroups{Group::arm0, Group::arm1, Group::overall};

std::string to_string(Group g);
Group group_from_string(const std::string& name);
constexpr std::size_t index(Group g) { return static_cast<std::size_t>(g); }

inline constexpr double kZ95 = 1.959963984540054;

/// Survival within this distance of the clamp boundaries gives a collapsed
/// log(-log) interval.
inline constexpr double kDegenerateMargin = 1e-5;

/// Lower bound on the (1 - lambda) factor of the continuous Greenwood
/// integrand.
inline constexpr double kGreenwoodFactorFloor = 0.5;

/// Additive running sums carried from site to site.
struct InferenceAccumulators {
  std::vector<double> eval_times;
  /// Per group, per eval time: sum of w^2 psi(t)^2.
  std::array<std::vector<double>, kGroupCount> sum_w2_psi2_surv;
  std::array<double, kGroupCount> sum_w{};
  std::array<double, kGroupCount> sum_w2{};
  std::array<std::int64_t, kGroupCount> count{};
  double sum_w2_psi2_logrank = 0.0;
  /// Treated and total record counts from the propensity pass (p-hat).
  std::int64_t n_treated = 0;
  std::int64_t n_total = 0;

  static InferenceAccumulators for_times(std::vector<double> times);
  void validate(const std::string& prefix = "") const;
  void merge(const InferenceAccumulators& other);
  double treated_fraction() const;
  friend bool operator==(const InferenceAccumulators&, const InferenceAccumulators&) = default;
};

struct ConfidenceInterval {
  double time = 0.0;
  double estimate = 1.0;
  double lower = 1.0;
  double upper = 1.0;
  double variance = 0.0;
  bool degenerate = false;
};

/// Continuous Greenwood variance of log(-log S(t)) from the curve alone.
/// Throws DegenerateStatisticError when S(t) sits at a clamp boundary.
double var_loglog(const SplineParams& params, double t, const IntegrationPolicy& policy);

/// 95% interval on the log(-log) scale. A boundary estimate yields a
/// degenerate interval collapsed onto the point.
ConfidenceInterval loglog_ci(const SplineParams& params, double t, const IntegrationPolicy& policy);

struct DistributedLogRank {
  double statistic = 0.0;
  double p_value = 1.0;
  std::array<double, 2> observed{};
  std::array<double, 2> expected{};
  double horizon = 0.0;
};

/// O_k = n_k int Y_k lambda_k, E_k = n_k int Y_k lambda, X^2 = sum (O-E)^2/E.
DistributedLogRank logrank_distributed(const SplineParams& g1, const SplineParams& g2,
                                       const SplineParams& all, double n1, double n2,
                                       const IntegrationPolicy& policy);

void accumulate_influence(InferenceAccumulators& acc, Group group, std::span<const double> psi,
                          double weight);

/// Adds w^2 psi^2 of `record` under `params` (the curve of `group`).
void accumulate_weighted_ci(InferenceAccumulators& acc, Group group, const SurvivalRecord& record,
                            double weight, const SplineParams& params,
                            const IntegrationPolicy& policy);

/// Var = sum w^2 psi^2 / (sum w)^2; interval S +- 1.96 sd clipped to [0, 1].
/// Throws ValidationError unless t is one of the accumulator's times.
ConfidenceInterval weighted_ci(const InferenceAccumulators& acc, Group group,
                               const SplineParams& params, double t);

/// Influence of single records on L = (O_1 - E_1) / N:
///   D (A - pi(X)) - A Lambda(X) + int_0^X lambda pi,  pi = p Y_1 / Y.
class LogRankInfluence {
 public:
  LogRankInfluence(const SplineParams& arm1, const SplineParams& all, double treated_fraction,
                   std::span<const double> record_times, const IntegrationPolicy& policy);
  double operator()(const SurvivalRecord& record) const;

 private:
  double pi(double t) const;
  CurveView arm1_;
  CurveView all_;
  double p_hat_;
  double support_;
  double origin_ = 0.0;
  std::vector<double> nodes_;
  std::vector<double> cum_;
  IntegrationPolicy policy_;
};

struct WeightedLogRank {
  double statistic = 0.0;  // L
  double variance = 0.0;
  double z = 0.0;
  double p_value = 1.0;
  std::array<double, 2> observed{};
  std::array<double, 2> expected{};
};

WeightedLogRank weighted_logrank(const InferenceAccumulators& acc, const SplineParams& g1,
                                 const SplineParams& g2, const SplineParams& all, double n1,
                                 double n2, const IntegrationPolicy& policy);

}  // namespace dkm
