#include "dkm/surv_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dkm/distributions.hpp"
#include "dkm/error.hpp"

namespace dkm {

void validate_records(std::span<const SurvivalRecord> records) {
  const std::size_t p = records.empty() ? 0 : records.front().covariates.size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = "record " + std::to_string(i) + ": ";
    if (!std::isfinite(r.time) || r.time < 0.0) {
      throw ValidationError(where + "time must be finite and nonnegative");
    }
    if (r.event != 0 && r.event != 1) throw ValidationError(where + "event must be 0 or 1");
    if (r.arm && *r.arm != 0 && *r.arm != 1) throw ValidationError(where + "arm must be 0 or 1");
    if (!std::isfinite(r.weight) || r.weight <= 0.0) {
      throw ValidationError(where + "weight must be positive");
    }
    if (r.covariates.size() != p) {
      throw ValidationError(where + "covariate length differs from the first record");
    }
    for (double z : r.covariates) {
      if (!std::isfinite(z)) throw ValidationError(where + "covariates must be finite");
    }
  }
}

double StepCurve::operator()(double t) const {
  const auto it = std::upper_bound(event_times.begin(), event_times.end(), t);
  if (it == event_times.begin()) return 1.0;
  return survival[static_cast<std::size_t>(it - event_times.begin()) - 1];
}

namespace {

StepCurve product_limit(std::span<const SurvivalRecord> records, bool weighted) {
  if (records.empty()) throw ValidationError("km_fit: empty record list");
  validate_records(records);

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Events sort ahead of censorings at tied times.
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].time != records[b].time) return records[a].time < records[b].time;
    return records[a].event > records[b].event;
  });

  StepCurve curve;
  curve.n_total = records.size();
  double remaining = 0.0;
  for (const auto& r : records) remaining += weighted ? r.weight : 1.0;
  curve.weight_total = remaining;

  double s = 1.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double t = records[order[k]].time;
    double d = 0.0;
    double leaving = 0.0;
    while (k < order.size() && records[order[k]].time == t) {
      const auto& r = records[order[k]];
      const double w = weighted ? r.weight : 1.0;
      if (r.event == 1) d += w;
      leaving += w;
      ++k;
    }
    if (d > 0.0) {
      const double n = remaining;
      s *= (d >= n) ? 0.0 : 1.0 - d / n;
      curve.event_times.push_back(t);
      curve.survival.push_back(s);
      curve.at_risk.push_back(n);
      curve.events.push_back(d);
    }
    remaining -= leaving;
  }
  return curve;
}

}  // namespace

StepCurve km_fit(std::span<const SurvivalRecord> records) { return product_limit(records, false); }

StepCurve km_fit_weighted(std::span<const SurvivalRecord> records) {
  return product_limit(records, true);
}

std::vector<double> at_risk_fraction(std::span<const SurvivalRecord> records,
                                     std::span<const double> times, bool weighted) {
  std::vector<std::pair<double, double>> tw;
  tw.reserve(records.size());
  double total = 0.0;
  for (const auto& r : records) {
    const double w = weighted ? r.weight : 1.0;
    tw.emplace_back(r.time, w);
    total += w;
  }
  std::sort(tw.begin(), tw.end());
  // Suffix sums of weight strictly beyond each position.
  std::vector<double> suffix(tw.size() + 1, 0.0);
  for (std::size_t i = tw.size(); i-- > 0;) suffix[i] = suffix[i + 1] + tw[i].second;

  std::vector<double> out;
  out.reserve(times.size());
  for (double t : times) {
    const auto it = std::upper_bound(tw.begin(), tw.end(), t,
                                     [](double v, const auto& p) { return v < p.first; });
    const auto idx = static_cast<std::size_t>(it - tw.begin());
    out.push_back(total > 0.0 ? suffix[idx] / total : 0.0);
  }
  return out;
}

double greenwood_discrete(const StepCurve& curve, double t) {
  const double s = curve(t);
  if (s >= 1.0 || s <= 0.0) {
    throw DegenerateStatisticError("greenwood_discrete: undefined at S(t) = " + std::to_string(s));
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < curve.event_times.size() && curve.event_times[j] <= t; ++j) {
    const double n = curve.at_risk[j];
    const double d = curve.events[j];
    sum += d / (n * (n - d));
  }
  const double ls = std::log(s);
  return sum / (ls * ls);
}

LogRankTest logrank_discrete(std::span<const SurvivalRecord> records) {
  validate_records(records);
  std::size_t count[2] = {0, 0};
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].arm) {
      throw ValidationError("logrank_discrete: record " + std::to_string(i) + " has no arm");
    }
    ++count[*records[i].arm];
  }
  if (count[0] == 0 || count[1] == 0) {
    throw ValidationError("logrank_discrete: both arms must be present");
  }

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return records[a].time < records[b].time; });

  LogRankTest out;
  double at_risk[2] = {static_cast<double>(count[0]), static_cast<double>(count[1])};
  std::size_t k = 0;
  while (k < order.size()) {
    const double t = records[order[k]].time;
    double d[2] = {0.0, 0.0};
    double leaving[2] = {0.0, 0.0};
    while (k < order.size() && records[order[k]].time == t) {
      const auto& r = records[order[k]];
      const int a = *r.arm;
      if (r.event == 1) d[a] += 1.0;
      leaving[a] += 1.0;
      ++k;
    }
    const double dt = d[0] + d[1];
    if (dt > 0.0) {
      const double n = at_risk[0] + at_risk[1];
      for (int g = 0; g < 2; ++g) {
        out.observed[g] += d[g];
        out.expected[g] += dt * at_risk[g] / n;
      }
    }
    at_risk[0] -= leaving[0];
    at_risk[1] -= leaving[1];
  }
  double x2 = 0.0;
  for (int g = 0; g < 2; ++g) {
    if (out.expected[g] > 0.0) {
      const double diff = out.observed[g] - out.expected[g];
      x2 += diff * diff / out.expected[g];
    }
  }
  out.statistic = x2;
  out.p_value = chi_square_sf(x2, 1.0);
  return out;
}

WeightedLogRankTest logrank_weighted_discrete(std::span<const SurvivalRecord> records) {
  validate_records(records);
  double total_w[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].arm) {
      throw ValidationError("logrank_weighted_discrete: record " + std::to_string(i) + " has no arm");
    }
    total_w[*records[i].arm] += records[i].weight;
  }
  if (total_w[0] == 0.0 || total_w[1] == 0.0) {
    throw ValidationError("logrank_weighted_discrete: both arms must be present");
  }
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return records[a].time < records[b].time; });

  // Per distinct time: treated share of the risk set and the cumulative
  // sums of dLambda and pi dLambda through that time.
  std::vector<double> times, share, cum, cum_pi;
  double at_risk[2] = {total_w[0], total_w[1]};
  double c0 = 0.0, cp = 0.0, numer = 0.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double t = records[order[k]].time;
    double d[2] = {0.0, 0.0}, leaving[2] = {0.0, 0.0};
    while (k < order.size() && records[order[k]].time == t) {
      const auto& r = records[order[k]];
      if (r.event == 1) d[*r.arm] += r.weight;
      leaving[*r.arm] += r.weight;
      ++k;
    }
    const double n = at_risk[0] + at_risk[1];
    const double pi = at_risk[1] / n;
    const double dt = d[0] + d[1];
    if (dt > 0.0) {
      c0 += dt / n;
      cp += pi * dt / n;
      numer += d[1] - dt * pi;
    }
    times.push_back(t);
    share.push_back(pi);
    cum.push_back(c0);
    cum_pi.push_back(cp);
    at_risk[0] -= leaving[0];
    at_risk[1] -= leaving[1];
  }
  const double sw = total_w[0] + total_w[1];
  WeightedLogRankTest out;
  out.statistic = numer / sw;
  double sum = 0.0;
  for (const auto& r : records) {
    const auto j = static_cast<std::size_t>(std::lower_bound(times.begin(), times.end(), r.time) - times.begin());
    const double a = *r.arm == 1 ? 1.0 : 0.0;
    const double psi = (r.event == 1 ? a - share[j] : 0.0) - a * cum[j] + cum_pi[j];
    sum += r.weight * r.weight * psi * psi;
  }
  out.variance = sum / (sw * sw);
  if (!(out.variance > 0.0)) {
    throw DegenerateStatisticError("logrank_weighted_discrete: variance is not positive");
  }
  out.z = out.statistic / std::sqrt(out.variance);
  out.p_value = normal_two_sided_p(out.z);
  return out;
}

}  // namespace dkm
