#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "dkm/federation.hpp"
#include "dkm/spline.hpp"
#include "dkm/surv_core.hpp"

namespace dkm::test {

inline SurvivalRecord rec(double time, int event, std::optional<int> arm = std::nullopt, double weight = 1.0) {
  SurvivalRecord r;
  r.time = time;
  r.event = event;
  r.arm = arm;
  r.weight = weight;
  return r;
}

// Exponential event times with mean `scale` (arm 1 hazard multiplied by hr),
// exponential censoring at rate `censor_rate`.
inline std::vector<SurvivalRecord> exponential_data(std::size_t n, double scale, double censor_rate,
                                                    std::uint64_t seed, bool arms = false, double hr = 1.0) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> unit(1.0);
  std::bernoulli_distribution coin(0.5);
  std::vector<SurvivalRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = arms ? static_cast<int>(coin(rng)) : 0;
    const double t = scale * unit(rng) / (a == 1 ? hr : 1.0);
    const double c = censor_rate > 0.0 ? unit(rng) / censor_rate : INFINITY;
    SurvivalRecord r = rec(std::min(t, c), t <= c ? 1 : 0);
    if (arms) r.arm = a;
    out.push_back(r);
  }
  return out;
}

// Adds two standard normal covariates with treatment drawn from
// expit(0.5 z1 + 0.5 z2).
inline void add_confounded_arms(std::vector<SurvivalRecord>& recs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& r : recs) {
    r.covariates = {z(rng), z(rng)};
    const double eta = 0.5 * r.covariates[0] + 0.5 * r.covariates[1];
    r.arm = u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0;
  }
}

inline std::vector<SiteDataset> split_sites(const std::vector<SurvivalRecord>& recs,
                                            const std::vector<std::size_t>& sizes) {
  std::vector<SiteDataset> sites;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    SiteDataset s;
    s.site_id = "s" + std::to_string(k + 1);
    s.records.assign(recs.begin() + static_cast<std::ptrdiff_t>(pos),
                     recs.begin() + static_cast<std::ptrdiff_t>(pos + sizes[k]));
    pos += sizes[k];
    sites.push_back(std::move(s));
  }
  return sites;
}

inline double sup_norm_vs_km(const SplineParams& p, const StepCurve& km) {
  const CurveView view(p);
  double worst = 0.0;
  for (double t : default_grid(p.t_max)) worst = std::max(worst, std::abs(view.survival(t) - km(t)));
  return worst;
}

inline double sup_norm(const SplineParams& a, const SplineParams& b) {
  const CurveView va(a), vb(b);
  double worst = 0.0;
  for (double t : default_grid(a.t_max)) worst = std::max(worst, std::abs(va.survival(t) - vb.survival(t)));
  return worst;
}

}  // namespace dkm::test
