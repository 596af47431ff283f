#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dkm/federation.hpp"

namespace dkm {

enum class ScenarioId { A, B, C, D, E };

std::string to_string(ScenarioId id);
ScenarioId scenario_from_string(const std::string& name);

enum class SurvivalFamily { exponential, weibull };

struct Scenario {
  ScenarioId id = ScenarioId::A;
  std::size_t n_total = 800;
  std::size_t site_min = 5;
  std::size_t site_max = 350;
  std::size_t n_sites = 10;
  SurvivalFamily family = SurvivalFamily::exponential;
  /// Weibull shape; 1 for exponential.
  double shape = 1.0;
  double target_censoring = 0.3;
  double hazard_ratio = 1.0;
  std::size_t knots = 9;

  static Scenario preset(ScenarioId id, double hazard_ratio = 1.0);
  void validate() const;
};

/// Survival quantile levels: F(t_q) = q.
inline constexpr std::array<double, 4> kQuantileLevels{0.25, 0.35, 0.50, 0.70};

/// One subject drawn from the scenario prior to censoring.
struct LatentSubject {
  std::vector<double> covariates;
  int arm = 0;
  double event_time = 0.0;
  /// Survival scale for this subject's covariates (control arm).
  double scale = 1.0;
};

LatentSubject draw_subject(const Scenario& s, std::mt19937_64& rng);

/// Conditional survival P(T > t | covariates, arm).
double conditional_survival(const Scenario& s, double scale, int arm, double t);

/// Population (marginal over covariates and arms) survival P(T > t).
double marginal_survival(const Scenario& s, double t);

struct Calibration {
  double censoring_rate = 0.0;
  double realized_censoring = 0.0;
  std::array<double, 4> quantile_times{};
  std::array<double, 4> truth{};
  double t_max = 0.0;
};

/// Exponential censoring rate hitting the target censoring on a fixed
/// 50,000-draw pilot, the population quantile times and the curve horizon
/// min(X_0.99, 1.2 t_0.70) from pilot follow-up.
Calibration calibrate(const Scenario& s);

/// Site sizes uniform on [min, max], rescaled to sum to n_total, clamped
/// to the bounds, largest first.
std::vector<std::size_t> partition_sites(const Scenario& s, std::mt19937_64& rng);

std::vector<SiteDataset> generate(const Scenario& s, const Calibration& calib, std::uint64_t seed);

FederationConfig scenario_config(const Scenario& s, const Calibration& calib);

struct SimulationConfig {
  FederationConfig federation;
  std::size_t repeats = 200;
  std::uint64_t seed = 1;
  double alpha = 0.05;
  unsigned threads = 0;
};

struct RepeatRecord {
  std::size_t repeat = 0;
  bool ok = true;
  std::string error;
  std::array<double, 4> distributed{};
  std::array<double, 4> pooled{};
  std::array<bool, 4> covered_distributed{};
  std::array<bool, 4> covered_pooled{};
  double sup_norm = 0.0;
  double p_distributed = 1.0;
  double p_pooled = 1.0;
  double p_weighted = 1.0;
  double p_pooled_weighted = 1.0;
  double seconds = 0.0;
};

struct SimMetrics {
  ScenarioId scenario = ScenarioId::A;
  double hazard_ratio = 1.0;
  Method method = Method::unweighted;
  std::size_t repeats = 0;
  std::size_t failures = 0;
  std::uint64_t seed = 0;
  Calibration calibration;
  std::array<double, 4> mean_abs_deviation{};
  std::array<double, 4> bias_distributed{};
  std::array<double, 4> bias_pooled{};
  std::array<double, 4> coverage_distributed{};
  std::array<double, 4> coverage_pooled{};
  double sup_norm_mean = 0.0;
  double sup_norm_p90 = 0.0;
  double fraction_sup_below_003 = 0.0;
  double rejection_distributed = 0.0;
  double rejection_pooled = 0.0;
  double rejection_weighted = 0.0;
  double rejection_pooled_weighted = 0.0;
  std::vector<RepeatRecord> per_repeat;
};

SimMetrics evaluate(const Scenario& s, const SimulationConfig& config);

}  // namespace dkm
