#include "dkm/inference.hpp"

#include <algorithm>
#include <cmath>

#include "dkm/distributions.hpp"
#include "dkm/error.hpp"
#include "dkm/influence.hpp"

namespace dkm {

namespace {

std::string join(const std::string& prefix, const std::string& field) {
  return prefix.empty() ? field : prefix + "." + field;
}

bool near_boundary(double s) {
  return s <= kProbFloor + kDegenerateMargin || s >= 1.0 - kProbFloor - kDegenerateMargin;
}

double common_support(std::initializer_list<const CurveView*> views) {
  double h = views.begin()[0]->t_max();
  for (const auto* v : views) h = std::min(h, v->support_limit(kSupportFloor));
  return h;
}

}  // namespace

std::string to_string(Group g) {
  switch (g) {
    case Group::arm0: return "arm0";
    case Group::arm1: return "arm1";
    case Group::overall: return "overall";
  }
  return "overall";
}

Group group_from_string(const std::string& name) {
  if (name == "arm0") return Group::arm0;
  if (name == "arm1") return Group::arm1;
  if (name == "overall") return Group::overall;
  throw ValidationError("unknown group '" + name + "'");
}

InferenceAccumulators InferenceAccumulators::for_times(std::vector<double> times) {
  InferenceAccumulators acc;
  if (!std::is_sorted(times.begin(), times.end()) ||
      std::adjacent_find(times.begin(), times.end()) != times.end()) {
    throw ValidationError("eval_times must be strictly increasing");
  }
  for (double t : times) {
    if (!std::isfinite(t) || t < 0.0) throw ValidationError("eval_times must be finite and >= 0");
  }
  acc.eval_times = std::move(times);
  for (auto& v : acc.sum_w2_psi2_surv) v.assign(acc.eval_times.size(), 0.0);
  return acc;
}

void InferenceAccumulators::validate(const std::string& prefix) const {
  for (std::size_t i = 0; i < eval_times.size(); ++i) {
    if (!std::isfinite(eval_times[i]) || eval_times[i] < 0.0 ||
        (i > 0 && !(eval_times[i] > eval_times[i - 1]))) {
      throw ProtocolError(join(prefix, "eval_times"), "must be finite, >= 0 and strictly increasing");
    }
  }
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    const std::string name = to_string(kAllGroups[g]);
    const auto& v = sum_w2_psi2_surv[g];
    if (v.size() != eval_times.size()) {
      throw ProtocolError(join(prefix, "sum_w2_psi2_surv." + name), "length must match eval_times");
    }
    for (double x : v) {
      if (!std::isfinite(x) || x < 0.0) {
        throw ProtocolError(join(prefix, "sum_w2_psi2_surv." + name), "sums must be finite and >= 0");
      }
    }
    if (!std::isfinite(sum_w[g]) || sum_w[g] < 0.0) {
      throw ProtocolError(join(prefix, "sum_w." + name), "must be finite and >= 0");
    }
    if (!std::isfinite(sum_w2[g]) || sum_w2[g] < 0.0) {
      throw ProtocolError(join(prefix, "sum_w2." + name), "must be finite and >= 0");
    }
    if (count[g] < 0) throw ProtocolError(join(prefix, "count." + name), "must be >= 0");
  }
  if (!std::isfinite(sum_w2_psi2_logrank) || sum_w2_psi2_logrank < 0.0) {
    throw ProtocolError(join(prefix, "sum_w2_psi2_logrank"), "must be finite and >= 0");
  }
  if (n_total < 0 || n_treated < 0 || n_treated > n_total) {
    throw ProtocolError(join(prefix, "n_treated"), "must lie in [0, n_total]");
  }
}

void InferenceAccumulators::merge(const InferenceAccumulators& other) {
  if (other.eval_times != eval_times) throw ValidationError("accumulators: eval_times differ");
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    for (std::size_t i = 0; i < eval_times.size(); ++i) {
      sum_w2_psi2_surv[g][i] += other.sum_w2_psi2_surv[g][i];
    }
    sum_w[g] += other.sum_w[g];
    sum_w2[g] += other.sum_w2[g];
    count[g] += other.count[g];
  }
  sum_w2_psi2_logrank += other.sum_w2_psi2_logrank;
  n_treated += other.n_treated;
  n_total += other.n_total;
}

double InferenceAccumulators::treated_fraction() const {
  if (n_total <= 0) throw DegenerateStatisticError("treated fraction: no records counted");
  return static_cast<double>(n_treated) / static_cast<double>(n_total);
}

double var_loglog(const SplineParams& params, double t, const IntegrationPolicy& policy) {
  if (params.n_cum < 1) throw ValidationError("var_loglog: n_cum must be >= 1");
  const CurveView view(params);
  if (t < 0.0 || t > params.t_max) throw DomainError("var_loglog: t outside [0, t_max]");
  const double s = view.survival(t);
  if (near_boundary(s)) {
    throw DegenerateStatisticError("var_loglog: S(t) = " + std::to_string(s) +
                                   " is at a clamp boundary");
  }
  const double upper = std::min(t, view.support_limit(kSupportFloor));
  const Integrand f = [&view](double u) {
    const auto pt = view.evaluate(u);
    return pt.hazard / (pt.at_risk * std::max(1.0 - pt.hazard, kGreenwoodFactorFloor));
  };
  const double a = view.origin_mass();
  const double integral = a / (view.at_risk(0.0) * std::max(1.0 - a, kGreenwoodFactorFloor)) +
                          integrate(f, 0.0, upper, policy);
  const double ls = std::log(s);
  return std::max(integral, 0.0) / (static_cast<double>(params.n_cum) * ls * ls);
}

ConfidenceInterval loglog_ci(const SplineParams& params, double t, const IntegrationPolicy& policy) {
  ConfidenceInterval ci;
  ci.time = t;
  const CurveView view(params);
  if (t < 0.0 || t > params.t_max) throw DomainError("loglog_ci: t outside [0, t_max]");
  ci.estimate = view.survival(t);
  if (near_boundary(ci.estimate)) {
    ci.lower = ci.upper = ci.estimate;
    ci.degenerate = true;
    return ci;
  }
  ci.variance = var_loglog(params, t, policy);
  const double se = std::sqrt(ci.variance);
  const double ll = std::log(-std::log(ci.estimate));
  ci.lower = std::exp(-std::exp(ll + kZ95 * se));
  ci.upper = std::exp(-std::exp(ll - kZ95 * se));
  return ci;
}

DistributedLogRank logrank_distributed(const SplineParams& g1, const SplineParams& g2,
                                       const SplineParams& all, double n1, double n2,
                                       const IntegrationPolicy& policy) {
  if (g1.t_max != all.t_max || g2.t_max != all.t_max) {
    throw ValidationError("logrank: curves must share t_max");
  }
  if (!(n1 > 0.0) || !(n2 > 0.0)) throw ValidationError("logrank: group sizes must be positive");
  const CurveView v1(g1), v2(g2), va(all);
  DistributedLogRank out;
  out.horizon = common_support({&v1, &v2, &va});
  const std::array<const CurveView*, 2> groups{&v1, &v2};
  const std::array<double, 2> n{n1, n2};
  for (std::size_t k = 0; k < 2; ++k) {
    const CurveView& vk = *groups[k];
    const Integrand obs = [&vk](double u) {
      const auto p = vk.evaluate(u);
      return p.at_risk * p.hazard;
    };
    const Integrand exp_ = [&vk, &va](double u) { return vk.at_risk(u) * va.hazard(u); };
    const double y0 = vk.at_risk(0.0);
    out.observed[k] = n[k] * (y0 * vk.origin_mass() + integrate(obs, 0.0, out.horizon, policy));
    out.expected[k] = n[k] * (y0 * va.origin_mass() + integrate(exp_, 0.0, out.horizon, policy));
    if (!(out.expected[k] > 0.0)) {
      throw DegenerateStatisticError("logrank: expected count of group " + std::to_string(k + 1) +
                                     " is not positive");
    }
  }
  for (std::size_t k = 0; k < 2; ++k) {
    const double d = out.observed[k] - out.expected[k];
    out.statistic += d * d / out.expected[k];
  }
  out.p_value = chi_square_sf(out.statistic, 1.0);
  return out;
}

void accumulate_influence(InferenceAccumulators& acc, Group group, std::span<const double> psi,
                          double weight) {
  if (!(weight > 0.0) || !std::isfinite(weight)) {
    throw ValidationError("accumulate: weight must be positive");
  }
  const std::size_t g = index(group);
  if (psi.size() != acc.eval_times.size()) throw ValidationError("accumulate: psi size mismatch");
  const double w2 = weight * weight;
  for (std::size_t i = 0; i < psi.size(); ++i) acc.sum_w2_psi2_surv[g][i] += w2 * psi[i] * psi[i];
  acc.sum_w[g] += weight;
  acc.sum_w2[g] += w2;
  acc.count[g] += 1;
}

void accumulate_weighted_ci(InferenceAccumulators& acc, Group group, const SurvivalRecord& record,
                            double weight, const SplineParams& params,
                            const IntegrationPolicy& policy) {
  const auto psi = influence_at(record, params, acc.eval_times, policy);
  accumulate_influence(acc, group, psi, weight);
}

ConfidenceInterval weighted_ci(const InferenceAccumulators& acc, Group group,
                               const SplineParams& params, double t) {
  const auto it = std::find(acc.eval_times.begin(), acc.eval_times.end(), t);
  if (it == acc.eval_times.end()) {
    throw ValidationError("weighted_ci: t = " + std::to_string(t) +
                          " is not one of the prespecified eval_times");
  }
  const std::size_t g = index(group);
  const auto i = static_cast<std::size_t>(it - acc.eval_times.begin());
  if (!(acc.sum_w[g] > 0.0)) throw DegenerateStatisticError("weighted_ci: no weight accumulated");
  ConfidenceInterval ci;
  ci.time = t;
  ci.estimate = CurveView(params).survival(std::min(t, params.t_max));
  ci.variance = acc.sum_w2_psi2_surv[g][i] / (acc.sum_w[g] * acc.sum_w[g]);
  const double half = kZ95 * std::sqrt(ci.variance);
  ci.lower = std::clamp(ci.estimate - half, 0.0, 1.0);
  ci.upper = std::clamp(ci.estimate + half, 0.0, 1.0);
  ci.degenerate = ci.variance == 0.0;
  return ci;
}

LogRankInfluence::LogRankInfluence(const SplineParams& arm1, const SplineParams& all,
                                   double treated_fraction, std::span<const double> record_times,
                                   const IntegrationPolicy& policy)
    : arm1_(arm1), all_(all), p_hat_(treated_fraction), policy_(policy) {
  if (!(p_hat_ > 0.0 && p_hat_ < 1.0)) {
    throw DegenerateStatisticError("logrank influence: treated fraction must lie in (0, 1)");
  }
  support_ = common_support({&all_, &arm1_});
  origin_ = all_.origin_mass() * pi(0.0);
  nodes_.reserve(record_times.size());
  for (double x : record_times) nodes_.push_back(std::clamp(x, 0.0, support_));
  std::sort(nodes_.begin(), nodes_.end());
  nodes_.erase(std::unique(nodes_.begin(), nodes_.end()), nodes_.end());
  const Integrand f = [this](double u) { return all_.hazard(u) * pi(u); };
  cum_ = integrate_batch(f, nodes_, policy_);
  for (double& c : cum_) c += origin_;
}

double LogRankInfluence::pi(double t) const {
  return std::clamp(p_hat_ * arm1_.at_risk(t) / all_.at_risk(t), 0.0, 1.0);
}

double LogRankInfluence::operator()(const SurvivalRecord& record) const {
  if (!record.arm) throw ValidationError("logrank influence: record has no arm");
  const double a = *record.arm == 1 ? 1.0 : 0.0;
  const double x = std::clamp(record.time, 0.0, support_);
  const auto it = std::lower_bound(nodes_.begin(), nodes_.end(), x);
  double integral;
  if (it != nodes_.end() && *it == x) {
    integral = cum_[static_cast<std::size_t>(it - nodes_.begin())];
  } else {
    const Integrand f = [this](double u) { return all_.hazard(u) * pi(u); };
    integral = origin_ + integrate(f, 0.0, x, policy_);
  }
  const double cum_hazard = -std::log(all_.survival(x));
  const double jump = record.event == 1 && record.time <= support_ ? a - pi(x) : 0.0;
  return jump - a * cum_hazard + integral;
}

WeightedLogRank weighted_logrank(const InferenceAccumulators& acc, const SplineParams& g1,
                                 const SplineParams& g2, const SplineParams& all, double n1,
                                 double n2, const IntegrationPolicy& policy) {
  const auto base = logrank_distributed(g1, g2, all, n1, n2, policy);
  WeightedLogRank out;
  out.observed = base.observed;
  out.expected = base.expected;
  const double n = n1 + n2;
  out.statistic = (base.observed[0] - base.expected[0]) / n;
  const double sw = acc.sum_w[index(Group::overall)];
  if (!(sw > 0.0)) throw DegenerateStatisticError("weighted logrank: no weight accumulated");
  out.variance = acc.sum_w2_psi2_logrank / (sw * sw);
  if (!(out.variance > 0.0)) {
    throw DegenerateStatisticError("weighted logrank: variance is not positive");
  }
  out.z = out.statistic / std::sqrt(out.variance);
  out.p_value = normal_two_sided_p(out.z);
  return out;
}

}  // namespace dkm
