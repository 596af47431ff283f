#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dkm/distributions.hpp"
#include "dkm/error.hpp"
#include "dkm/surv_core.hpp"
#include "support.hpp"

using namespace dkm;
using dkm::test::rec;

TEST(KaplanMeier, AllCensoredIsFlat) {
  const std::vector<SurvivalRecord> r{rec(1, 0), rec(2, 0), rec(5, 0)};
  const auto km = km_fit(r);
  for (double t : {0.0, 1.0, 3.0, 10.0}) EXPECT_EQ(km(t), 1.0);
}

TEST(KaplanMeier, ThreeRecordHandEvaluation) {
  const std::vector<SurvivalRecord> r{rec(1, 1), rec(2, 0), rec(3, 1)};
  const auto km = km_fit(r);
  EXPECT_DOUBLE_EQ(km(0.5), 1.0);
  EXPECT_DOUBLE_EQ(km(1.0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(km(2.0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(km(3.0), 0.0);
  EXPECT_EQ(km.n_total, 3u);
}

TEST(KaplanMeier, TiesMatchReferenceImplementation) {
  // statsmodels SurvfuncRight on the same 12 records.
  const std::vector<double> t{2, 3, 3, 3, 5, 7, 7, 8, 10, 12, 12, 15};
  const std::vector<int> d{1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0};
  std::vector<SurvivalRecord> r;
  for (std::size_t i = 0; i < t.size(); ++i) r.push_back(rec(t[i], d[i]));
  const auto km = km_fit(r);
  const std::vector<double> times{2, 3, 7, 8, 10, 12};
  const std::vector<double> ref{0.9166666666666666, 0.7499999999999999, 0.6428571428571428,
                                0.5142857142857142, 0.38571428571428573, 0.2571428571428572};
  ASSERT_EQ(km.event_times, times);
  for (std::size_t j = 0; j < ref.size(); ++j) EXPECT_NEAR(km.survival[j], ref[j], 1e-14);
  EXPECT_NEAR(greenwood_discrete(km, 8.0), 0.22973495807791552, 1e-13);
}

TEST(KaplanMeier, RejectsBadInput) {
  EXPECT_THROW(km_fit(std::vector<SurvivalRecord>{}), ValidationError);
  EXPECT_THROW(km_fit(std::vector<SurvivalRecord>{rec(-1, 1)}), ValidationError);
  EXPECT_THROW(km_fit(std::vector<SurvivalRecord>{rec(1, 2)}), ValidationError);
  EXPECT_THROW(km_fit_weighted(std::vector<SurvivalRecord>{rec(1, 1, std::nullopt, 0.0)}), ValidationError);
  auto a = rec(1, 1);
  auto b = rec(2, 1);
  a.covariates = {1.0};
  EXPECT_THROW(km_fit(std::vector<SurvivalRecord>{a, b}), ValidationError);
}

TEST(KaplanMeier, WeightedHandEvaluation) {
  const std::vector<SurvivalRecord> r{rec(1, 1, std::nullopt, 2.0), rec(2, 0, std::nullopt, 1.0)};
  EXPECT_DOUBLE_EQ(km_fit_weighted(r)(1.0), 1.0 / 3.0);
}

TEST(KaplanMeier, WeightedReducesToUnweighted) {
  auto r = test::exponential_data(300, 10.0, 0.05, 3);
  const auto a = km_fit(r);
  const auto b = km_fit_weighted(r);
  EXPECT_EQ(a.event_times, b.event_times);
  EXPECT_EQ(a.survival, b.survival);
  for (auto& x : r) x.weight = 3.7;
  const auto c = km_fit_weighted(r);
  for (std::size_t j = 0; j < a.survival.size(); ++j) EXPECT_NEAR(a.survival[j], c.survival[j], 1e-14);
}

TEST(KaplanMeier, StepCurveProperties) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto r = test::exponential_data(80, 5.0, 0.1, seed);
    const auto km = km_fit(r);
    for (std::size_t j = 0; j < km.survival.size(); ++j) {
      EXPECT_GE(km.survival[j], 0.0);
      EXPECT_LE(km.survival[j], 1.0);
      EXPECT_LE(km.events[j], km.at_risk[j]);
      if (j > 0) {
        EXPECT_LE(km.survival[j], km.survival[j - 1]);
        EXPECT_GT(km.event_times[j], km.event_times[j - 1]);
      }
      // right-continuous: value at an event time already includes the drop
      EXPECT_EQ(km(km.event_times[j]), km.survival[j]);
    }
    for (double t = 0.1; t < 10.0; t += 0.7) {
      if (km(t) > 0.0 && km(t) < 1.0) EXPECT_GE(greenwood_discrete(km, t), 0.0);
    }
  }
}

TEST(Greenwood, HandEvaluationAndSingularities) {
  const std::vector<SurvivalRecord> r{rec(1, 1), rec(2, 0), rec(3, 1)};
  const auto km = km_fit(r);
  EXPECT_NEAR(greenwood_discrete(km, 1.0), (1.0 / 6.0) / std::pow(std::log(2.0 / 3.0), 2), 1e-14);
  EXPECT_THROW(greenwood_discrete(km, 0.5), DegenerateStatisticError);
  EXPECT_THROW(greenwood_discrete(km, 3.0), DegenerateStatisticError);
}

TEST(Greenwood, ExtraCensoredRecordRecomputed) {
  std::vector<SurvivalRecord> r{rec(1, 1), rec(2, 0), rec(3, 1), rec(4, 1)};
  const double before = greenwood_discrete(km_fit(r), 1.0);
  r.push_back(rec(5, 0));
  const double after = greenwood_discrete(km_fit(r), 1.0);
  // n_1 goes from 4 to 5: sum term 1/(5*4), S = 4/5.
  EXPECT_NEAR(before, (1.0 / 12.0) / std::pow(std::log(0.75), 2), 1e-14);
  EXPECT_NEAR(after, (1.0 / 20.0) / std::pow(std::log(0.8), 2), 1e-14);
}

TEST(LogRank, IdenticalArmsGiveZero) {
  std::vector<SurvivalRecord> r;
  for (int a = 0; a < 2; ++a) {
    for (double t : {1.0, 2.0, 4.0}) r.push_back(rec(t, 1, a));
    r.push_back(rec(3.0, 0, a));
  }
  const auto lr = logrank_discrete(r);
  EXPECT_NEAR(lr.statistic, 0.0, 1e-14);
  EXPECT_NEAR(lr.p_value, 1.0, 1e-12);
}

TEST(LogRank, SixRecordTabulation) {
  // Risk sets by hand: t=1 (6 at risk, 3 each), 2 (5; 2/3), 3 (4; 2/2), 6 (1; 0/1).
  const std::vector<SurvivalRecord> r{rec(1, 1, 0), rec(3, 1, 0), rec(5, 0, 0),
                                      rec(2, 1, 1), rec(4, 0, 1), rec(6, 1, 1)};
  const auto lr = logrank_discrete(r);
  EXPECT_NEAR(lr.observed[0], 2.0, 1e-14);
  EXPECT_NEAR(lr.observed[1], 2.0, 1e-14);
  EXPECT_NEAR(lr.expected[0], 1.4, 1e-14);
  EXPECT_NEAR(lr.expected[1], 2.6, 1e-14);
  EXPECT_NEAR(lr.statistic, 0.39560439560439575, 1e-13);
  EXPECT_NEAR(lr.p_value, 0.5293681061847977, 1e-10);
}

TEST(LogRank, OrderAndLabelInvariance) {
  auto r = test::exponential_data(200, 8.0, 0.05, 9, true, 1.4);
  const auto base = logrank_discrete(r);
  std::mt19937_64 rng(4);
  std::shuffle(r.begin(), r.end(), rng);
  EXPECT_NEAR(logrank_discrete(r).statistic, base.statistic, 1e-10);
  for (auto& x : r) x.arm = 1 - *x.arm;
  EXPECT_NEAR(logrank_discrete(r).statistic, base.statistic, 1e-10);
}

TEST(LogRank, SingleArmRejected) {
  const std::vector<SurvivalRecord> r{rec(1, 1, 0), rec(2, 1, 0)};
  EXPECT_THROW(logrank_discrete(r), ValidationError);
  const std::vector<SurvivalRecord> none{rec(1, 1), rec(2, 1)};
  EXPECT_THROW(logrank_discrete(none), ValidationError);
}

TEST(LogRank, WeightedDiscreteUnitWeightsSymmetric) {
  std::vector<SurvivalRecord> r;
  for (int a = 0; a < 2; ++a) {
    for (double t : {1.0, 2.0, 4.0, 6.0}) r.push_back(rec(t, 1, a));
  }
  const auto w = logrank_weighted_discrete(r);
  EXPECT_NEAR(w.statistic, 0.0, 1e-14);
  EXPECT_NEAR(w.p_value, 1.0, 1e-12);
}

TEST(LogRank, WeightedDiscreteAgreesWithChiSquareUnderUnitWeights) {
  // With unit weights z^2 and the sum-form statistic estimate the same
  // quantity; decisions should agree on nearly every seed.
  int agree = 0;
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const auto r = test::exponential_data(300, 8.0, 0.05, seed, true, 1.3);
    const bool a = logrank_discrete(r).p_value < 0.05;
    const bool b = logrank_weighted_discrete(r).p_value < 0.05;
    agree += a == b;
  }
  EXPECT_GE(agree, 37);
}

TEST(Distributions, ReferenceTails) {
  // scipy.stats reference values
  EXPECT_NEAR(chi_square_sf(0.5), 0.47950012218695337, 1e-12);
  EXPECT_NEAR(chi_square_sf(3.841458820694124), 0.05, 1e-12);
  EXPECT_NEAR(chi_square_sf(10.0), 0.001565402258002549, 1e-13);
  EXPECT_NEAR(chi_square_sf(25.0), 5.733031437583875e-07, 1e-15);
  EXPECT_EQ(chi_square_sf(0.0), 1.0);
  EXPECT_NEAR(normal_sf(0.0), 0.5, 1e-15);
  EXPECT_NEAR(normal_sf(1.0), 0.15865525393145707, 1e-13);
  EXPECT_NEAR(normal_sf(1.959963984540054), 0.025, 1e-13);
  EXPECT_NEAR(normal_sf(3.5), 0.00023262907903552502, 1e-15);
  EXPECT_NEAR(normal_sf(-2.0), 0.9772498680518208, 1e-13);
  EXPECT_NEAR(normal_two_sided_p(-1.959963984540054), 0.05, 1e-12);
  EXPECT_NEAR(regularized_gamma_q(2.5, 1.7), 0.6385699231037951, 1e-12);
  EXPECT_NEAR(regularized_gamma_q(0.5, 30.0), 9.485737571073857e-15, 1e-20);
}
