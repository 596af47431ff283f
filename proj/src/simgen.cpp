#include "dkm/simgen.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

#include "dkm/error.hpp"
#include "dkm/propensity.hpp"
#include "dkm/quadrature.hpp"

namespace dkm {

namespace {

constexpr std::size_t kPilotDraws = 50000;
constexpr std::uint64_t kPilotSeed = 0x5eed2024ULL;
constexpr double kHorizonQuantile = 0.99;
constexpr double kHorizonStretch = 1.2;
constexpr double kSupNormTarget = 0.03;
constexpr std::size_t kFirstSiteFloor = 60;

// Variance of 0.5 X1 + 0.5 X2 for independent standard normals.
constexpr double kLinearPredictorVar = 0.5;

double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double treat_probability(const Scenario& s, const std::vector<double>& z) {
  switch (s.id) {
    case ScenarioId::A: return 0.5;
    case ScenarioId::B: return 0.3 + 0.4 * z[0];
    default: return expit(0.5 * z[0] + 0.5 * z[1]);
  }
}

double control_scale(const Scenario& s, const std::vector<double>& z) {
  switch (s.id) {
    case ScenarioId::A: return 15.0;
    case ScenarioId::B: return 20.0 - 10.0 * z[0];
    default: return 12.0 * std::exp(0.5 * z[0] + 0.5 * z[1]);
  }
}

template <class F>
double average_over_predictor(F&& f) {
  const double sd = std::sqrt(kLinearPredictorVar);
  const Integrand g = [&](double u) {
    const double d = std::exp(-0.5 * u * u / kLinearPredictorVar) / (sd * std::sqrt(2.0 * M_PI));
    return f(u) * d;
  };
  IntegrationPolicy pol;
  pol.restriction = 10.0 * sd;
  pol.abs_tol = 1e-12;
  return integrate(g, -10.0 * sd, 10.0 * sd, pol);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

double unit_exponential(std::mt19937_64& rng) {
  return -std::log1p(-std::generate_canonical<double, 53>(rng));
}

double quantile_of(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

std::string to_string(ScenarioId id) {
  return std::string(1, "ABCDE"[static_cast<int>(id)]);
}

ScenarioId scenario_from_string(const std::string& name) {
  if (name.size() == 1) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    if (c >= 'A' && c <= 'E') return static_cast<ScenarioId>(c - 'A');
  }
  throw ValidationError("unknown scenario '" + name + "' (expected A, B, C, D or E)");
}

Scenario Scenario::preset(ScenarioId id, double hazard_ratio) {
  Scenario s;
  s.id = id;
  s.hazard_ratio = hazard_ratio;
  const bool large = id == ScenarioId::D || id == ScenarioId::E;
  s.n_total = large ? 2000 : 800;
  s.site_min = 5;
  s.site_max = large ? 1000 : 350;
  s.n_sites = 10;
  const bool weibull = id == ScenarioId::C || large;
  s.family = weibull ? SurvivalFamily::weibull : SurvivalFamily::exponential;
  s.shape = weibull ? 0.5 : 1.0;
  s.target_censoring = id == ScenarioId::E ? 0.5 : 0.3;
  s.knots = large ? 12 : 9;
  return s;
}

void Scenario::validate() const {
  if (n_sites < 1) throw ValidationError("scenario: n_sites must be >= 1");
  if (site_min < 1 || site_min > site_max) throw ValidationError("scenario: invalid site bounds");
  if (n_sites * site_min > n_total || n_sites * site_max < n_total) {
    throw ValidationError("scenario: site bounds [" + std::to_string(site_min) + ", " +
                          std::to_string(site_max) + "] cannot partition " + std::to_string(n_total) +
                          " records into " + std::to_string(n_sites) + " sites");
  }
  if (!(target_censoring > 0.0 && target_censoring < 1.0)) {
    throw ValidationError("scenario: target censoring must lie in (0, 1)");
  }
  if (!(hazard_ratio > 0.0)) throw ValidationError("scenario: hazard ratio must be positive");
  if (!(shape > 0.0)) throw ValidationError("scenario: shape must be positive");
}

LatentSubject draw_subject(const Scenario& s, std::mt19937_64& rng) {
  LatentSubject out;
  if (s.id == ScenarioId::B) {
    out.covariates = {std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0};
  } else if (s.id != ScenarioId::A) {
    std::normal_distribution<double> n01;
    const double z1 = n01(rng);
    const double z2 = n01(rng);
    out.covariates = {z1, z2};
  }
  out.arm = std::bernoulli_distribution(treat_probability(s, out.covariates))(rng) ? 1 : 0;
  out.scale = control_scale(s, out.covariates);
  const double hr = out.arm == 1 ? s.hazard_ratio : 1.0;
  out.event_time = out.scale * std::pow(unit_exponential(rng) / hr, 1.0 / s.shape);
  return out;
}

double conditional_survival(const Scenario& s, double scale, int arm, double t) {
  const double hr = arm == 1 ? s.hazard_ratio : 1.0;
  return std::exp(-hr * std::pow(t / scale, s.shape));
}

double marginal_survival(const Scenario& s, double t) {
  const auto mix = [&](double p, double scale) {
    return (1.0 - p) * conditional_survival(s, scale, 0, t) + p * conditional_survival(s, scale, 1, t);
  };
  switch (s.id) {
    case ScenarioId::A: return mix(0.5, 15.0);
    case ScenarioId::B: return 0.5 * mix(0.3, 20.0) + 0.5 * mix(0.7, 10.0);
    default: return average_over_predictor([&](double u) { return mix(expit(u), 12.0 * std::exp(u)); });
  }
}

Calibration calibrate(const Scenario& s) {
  s.validate();
  std::mt19937_64 rng(kPilotSeed + static_cast<std::uint64_t>(s.id));
  std::vector<double> t(kPilotDraws), e(kPilotDraws);
  for (std::size_t i = 0; i < kPilotDraws; ++i) {
    t[i] = draw_subject(s, rng).event_time;
    e[i] = unit_exponential(rng);
  }
  const auto censored = [&](double rate) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < kPilotDraws; ++i) c += e[i] / rate < t[i];
    return static_cast<double>(c) / static_cast<double>(kPilotDraws);
  };
  double lo = std::log(1e-8), hi = std::log(1e4);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (censored(std::exp(mid)) < s.target_censoring ? lo : hi) = mid;
  }
  Calibration c;
  c.censoring_rate = std::exp(0.5 * (lo + hi));
  c.realized_censoring = censored(c.censoring_rate);

  for (std::size_t q = 0; q < kQuantileLevels.size(); ++q) {
    const double target = 1.0 - kQuantileLevels[q];
    double a = 0.0, b = 1.0;
    while (marginal_survival(s, b) > target) b *= 2.0;
    for (int it = 0; it < 100; ++it) {
      const double m = 0.5 * (a + b);
      (marginal_survival(s, m) > target ? a : b) = m;
    }
    c.quantile_times[q] = 0.5 * (a + b);
    c.truth[q] = marginal_survival(s, c.quantile_times[q]);
  }
  std::vector<double> x(kPilotDraws);
  for (std::size_t i = 0; i < kPilotDraws; ++i) x[i] = std::min(t[i], e[i] / c.censoring_rate);
  c.t_max = std::min(quantile_of(std::move(x), kHorizonQuantile), kHorizonStretch * c.quantile_times.back());
  return c;
}

std::vector<std::size_t> partition_sites(const Scenario& s, std::mt19937_64& rng) {
  s.validate();
  std::uniform_int_distribution<std::size_t> u(s.site_min, s.site_max);
  std::vector<double> raw(s.n_sites);
  for (double& r : raw) r = static_cast<double>(u(rng));
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  std::vector<std::size_t> sizes(s.n_sites);
  for (std::size_t j = 0; j < s.n_sites; ++j) {
    const double scaled = std::round(raw[j] * static_cast<double>(s.n_total) / total);
    sizes[j] = std::clamp(static_cast<std::size_t>(std::max(scaled, 0.0)), s.site_min, s.site_max);
  }
  auto sum = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  for (std::size_t j = s.n_sites - 1; sum != s.n_total; j = (j + s.n_sites - 1) % s.n_sites) {
    if (sum < s.n_total && sizes[j] < s.site_max) {
      ++sizes[j];
      ++sum;
    } else if (sum > s.n_total && sizes[j] > s.site_min) {
      --sizes[j];
      --sum;
    }
  }
  std::sort(sizes.begin(), sizes.end(), std::greater<>());
  return sizes;
}

std::vector<SiteDataset> generate(const Scenario& s, const Calibration& calib, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> sizes = partition_sites(s, rng);
  const std::size_t floor = std::min(kFirstSiteFloor, s.n_total);
  for (int tries = 0; sizes.front() < floor && tries < 1000; ++tries) sizes = partition_sites(s, rng);

  std::vector<SiteDataset> sites;
  sites.reserve(sizes.size());
  for (std::size_t j = 0; j < sizes.size(); ++j) {
    SiteDataset site;
    site.site_id = "site" + std::string(j + 1 < 10 ? "0" : "") + std::to_string(j + 1);
    site.records.reserve(sizes[j]);
    for (std::size_t i = 0; i < sizes[j]; ++i) {
      const LatentSubject subj = draw_subject(s, rng);
      const double c = unit_exponential(rng) / calib.censoring_rate;
      SurvivalRecord r;
      r.time = std::min(subj.event_time, c);
      r.event = subj.event_time <= c ? 1 : 0;
      r.arm = subj.arm;
      r.covariates = subj.covariates;
      site.records.push_back(std::move(r));
    }
    sites.push_back(std::move(site));
  }
  return sites;
}

FederationConfig scenario_config(const Scenario& s, const Calibration& calib) {
  FederationConfig c;
  c.knots = s.knots;
  c.t_max = calib.t_max;
  c.eval_times.assign(calib.quantile_times.begin(), calib.quantile_times.end());
  return c;
}

namespace {

RepeatRecord run_repeat(const Scenario& s, const Calibration& calib, const SimulationConfig& config,
                        std::size_t repeat) {
  RepeatRecord rec;
  rec.repeat = repeat;
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto sites = generate(s, calib, mix_seed(config.seed, repeat));
    std::vector<SurvivalRecord> pooled;
    for (const auto& site : sites) pooled.insert(pooled.end(), site.records.begin(), site.records.end());

    const StudyResult result = run_study(sites, config.federation);
    const GroupResult& overall = result.group(Group::overall);
    const CurveView view(overall.params);

    const bool ipw = config.federation.method == Method::ipw;
    if (ipw && !config.federation.force_unit_weights) {
      const auto state = propensity_init(pooled);
      const auto w = weights_for(pooled, state);
      for (std::size_t i = 0; i < pooled.size(); ++i) pooled[i].weight = w.weights[i];
    }
    const StepCurve km = ipw ? km_fit_weighted(pooled) : km_fit(pooled);

    const auto& times = config.federation.eval_times;
    for (std::size_t q = 0; q < std::min<std::size_t>(times.size(), 4); ++q) {
      const double t = times[q];
      rec.distributed[q] = view.survival(t);
      rec.pooled[q] = km(t);
      const auto& ci = overall.intervals[q];
      rec.covered_distributed[q] = ci.lower <= calib.truth[q] && calib.truth[q] <= ci.upper;
      try {
        const double v = greenwood_discrete(km, t);
        const double ll = std::log(-std::log(rec.pooled[q]));
        const double lower = std::exp(-std::exp(ll + kZ95 * std::sqrt(v)));
        const double upper = std::exp(-std::exp(ll - kZ95 * std::sqrt(v)));
        rec.covered_pooled[q] = lower <= calib.truth[q] && calib.truth[q] <= upper;
      } catch (const DegenerateStatisticError&) {
        rec.covered_pooled[q] = false;
      }
    }
    for (double t : default_grid(overall.params.t_max)) {
      rec.sup_norm = std::max(rec.sup_norm, std::abs(view.survival(t) - km(t)));
    }
    rec.p_pooled = logrank_discrete(pooled).p_value;
    if (ipw) rec.p_pooled_weighted = logrank_weighted_discrete(pooled).p_value;
    if (result.logrank) rec.p_distributed = result.logrank->p_value;
    if (result.weighted_logrank) rec.p_weighted = result.weighted_logrank->p_value;
    if (!result.logrank) {
      rec.ok = false;
      rec.error = "log-rank unavailable";
    }
  } catch (const std::exception& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

}  // namespace

SimMetrics evaluate(const Scenario& s, const SimulationConfig& config) {
  if (config.repeats < 1) throw ValidationError("repeats: must be >= 1");
  config.federation.validate();
  SimMetrics m;
  m.scenario = s.id;
  m.hazard_ratio = s.hazard_ratio;
  m.method = config.federation.method;
  m.repeats = config.repeats;
  m.seed = config.seed;
  m.calibration = calibrate(s);
  m.per_repeat.resize(config.repeats);

  unsigned threads = config.threads ? config.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(config.repeats));
  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t r = next++; r < config.repeats; r = next++) {
      m.per_repeat[r] = run_repeat(s, m.calibration, config, r);
    }
  };
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned i = 0; i < threads; ++i) pool.emplace_back(work);
  }

  std::vector<double> sups;
  std::size_t ok = 0, rej_d = 0, rej_p = 0, rej_w = 0, rej_pw = 0, sup_ok = 0;
  for (const auto& r : m.per_repeat) {
    if (!r.ok) {
      ++m.failures;
      continue;
    }
    ++ok;
    for (std::size_t q = 0; q < 4; ++q) {
      m.mean_abs_deviation[q] += std::abs(r.distributed[q] - r.pooled[q]);
      m.bias_distributed[q] += r.distributed[q] - m.calibration.truth[q];
      m.bias_pooled[q] += r.pooled[q] - m.calibration.truth[q];
      m.coverage_distributed[q] += r.covered_distributed[q];
      m.coverage_pooled[q] += r.covered_pooled[q];
    }
    sups.push_back(r.sup_norm);
    sup_ok += r.sup_norm < kSupNormTarget;
    rej_d += r.p_distributed < config.alpha;
    rej_p += r.p_pooled < config.alpha;
    rej_w += r.p_weighted < config.alpha;
    rej_pw += r.p_pooled_weighted < config.alpha;
  }
  if (ok > 0) {
    const double n = static_cast<double>(ok);
    for (std::size_t q = 0; q < 4; ++q) {
      m.mean_abs_deviation[q] /= n;
      m.bias_distributed[q] /= n;
      m.bias_pooled[q] /= n;
      m.coverage_distributed[q] /= n;
      m.coverage_pooled[q] /= n;
    }
    m.sup_norm_mean = std::accumulate(sups.begin(), sups.end(), 0.0) / n;
    m.sup_norm_p90 = quantile_of(sups, 0.9);
    m.fraction_sup_below_003 = static_cast<double>(sup_ok) / n;
    m.rejection_distributed = static_cast<double>(rej_d) / n;
    m.rejection_pooled = static_cast<double>(rej_p) / n;
    m.rejection_weighted = static_cast<double>(rej_w) / n;
    m.rejection_pooled_weighted = static_cast<double>(rej_pw) / n;
  }
  return m;
}

}  // namespace dkm
