#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "dkm/error.hpp"
#include "dkm/propensity.hpp"
#include "support.hpp"

using namespace dkm;

namespace {

std::vector<SurvivalRecord> logistic_data(std::size_t n, std::vector<double> alpha, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SurvivalRecord> out(n);
  for (auto& r : out) {
    double eta = alpha[0];
    for (std::size_t j = 1; j < alpha.size(); ++j) {
      r.covariates.push_back(z(rng));
      eta += alpha[j] * r.covariates.back();
    }
    r.arm = u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0;
    r.time = 1.0;
  }
  return out;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Propensity, MatchesReferenceMle) {
  // statsmodels Logit on the same 40 records.
  const std::vector<std::array<double, 2>> z{
      {0.034, 1.36},   {1.225, -0.51},  {-0.298, -0.527}, {0.57, -0.056},   {0.747, -1.847},
      {1.567, -0.096}, {0.68, -0.137},  {-0.379, 0.463},  {0.825, -0.203},  {-0.153, 0.686},
      {-0.87, -1.514}, {0.395, -0.671}, {-1.92, -0.814},  {-0.468, -1.193}, {-1.492, 0.037},
      {0.897, -0.233}, {-0.744, 0.385}, {0.717, -0.3},    {0.545, 1.043},   {-0.207, -0.814},
      {0.348, 0.248},  {1.099, -1.285}, {-0.662, -0.838}, {-1.734, 0.126},  {0.528, -0.739},
      {1.386, 0.822},  {0.627, 0.402},  {0.956, -1.332},  {0.614, 0.603},   {-1.768, 0.347},
      {-0.25, 0.782},  {-0.439, -0.018}, {0.343, -0.876}, {0.599, -0.105},  {0.492, -0.522},
      {1.086, 0.605},  {-0.178, 0.632}, {1.26, 1.791},    {-1.574, 0.883},  {0.465, -0.094}};
  const std::vector<int> a{0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 1,
                           1, 1, 0, 0, 1, 1, 1, 0, 1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1};
  std::vector<SurvivalRecord> r(z.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i].time = 1.0;
    r[i].arm = a[i];
    r[i].covariates = {z[i][0], z[i][1]};
  }
  const auto s = propensity_init(r);
  EXPECT_NEAR(s.coef[0], 0.2025955628574373, 1e-8);
  EXPECT_NEAR(s.coef[1], 1.0828612589278455, 1e-8);
  EXPECT_NEAR(s.coef[2], 0.10504409642111973, 1e-8);
  // standard errors from the inverse information
  const Eigen::MatrixXd cov = s.info_matrix().inverse();
  EXPECT_NEAR(std::sqrt(cov(1, 1)), 0.4412976003497696, 1e-6);
  EXPECT_EQ(s.n_cum, 40);
}

TEST(Propensity, InterceptOnlyIsLogitOfTreatedFraction) {
  std::vector<SurvivalRecord> r(50);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i].time = 1.0;
    r[i].arm = i < 18 ? 1 : 0;
  }
  const auto s = propensity_init(r);
  ASSERT_EQ(s.coef.size(), 1u);
  EXPECT_NEAR(s.coef[0], std::log(18.0 / 32.0), 1e-8);
}

TEST(Propensity, RecoversSlope) {
  const auto r = logistic_data(500, {0.0, 0.5}, 31);
  const auto s = propensity_init(r);
  const double se = std::sqrt(s.info_matrix().inverse()(1, 1));
  EXPECT_LT(std::abs(s.coef[1] - 0.5), 3 * se);
}

TEST(Propensity, SeparationAndRankErrors) {
  std::vector<SurvivalRecord> r(20);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i].time = 1.0;
    r[i].covariates = {static_cast<double>(i)};
    r[i].arm = i < 10 ? 0 : 1;
  }
  EXPECT_THROW(propensity_init(r), ConvergenceError);
  for (auto& x : r) x.covariates = {1.0};
  r[0].arm = 1;
  EXPECT_THROW(propensity_init(r), ValidationError);
  for (auto& x : r) x.arm = 1;
  EXPECT_THROW(propensity_init(r), ValidationError);
}

TEST(Propensity, EmptyUpdateIsIdentity) {
  const auto r = logistic_data(200, {0.2, 0.4, -0.3}, 5);
  const auto s = propensity_init(r);
  EXPECT_EQ(propensity_update(s, std::vector<SurvivalRecord>{}), s);
}

TEST(Propensity, TwoSiteRenewableMatchesPooled) {
  const auto r = logistic_data(1000, {-0.2, 0.5, 0.5}, 7);
  const std::vector<SurvivalRecord> a(r.begin(), r.begin() + 400), b(r.begin() + 400, r.end());
  const auto s = propensity_update(propensity_init(a), b);
  EXPECT_LT(max_diff(s.coef, logistic_mle(r)), 5e-3);
  EXPECT_EQ(s.n_cum, 1000);
}

TEST(Propensity, ThreeSiteOrderInsensitiveAndPsd) {
  const auto r = logistic_data(1200, {0.1, -0.6, 0.3}, 8);
  std::vector<std::vector<SurvivalRecord>> parts{{r.begin(), r.begin() + 500},
                                                 {r.begin() + 500, r.begin() + 800},
                                                 {r.begin() + 800, r.end()}};
  std::vector<int> order{0, 1, 2};
  std::vector<std::vector<double>> results;
  do {
    auto s = propensity_init(parts[order[0]]);
    for (int k = 1; k < 3; ++k) {
      s = propensity_update(s, parts[order[k]]);
      const Eigen::MatrixXd info = s.info_matrix();
      EXPECT_LT((info - info.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
      EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
    }
    results.push_back(s.coef);
  } while (std::next_permutation(order.begin(), order.end()));
  for (const auto& c : results) EXPECT_LT(max_diff(c, results.front()), 2e-2);
}

TEST(Propensity, SingleSiteIsMle) {
  const auto r = logistic_data(300, {0.3, 0.7}, 12);
  EXPECT_EQ(propensity_init(r).coef, logistic_mle(r));
}

TEST(Weights, FormulaAndClamp) {
  PropensityState s;
  s.coef = {0.0};
  s.cum_info = {1.0};
  s.n_cum = 1;
  std::vector<SurvivalRecord> r{test::rec(1, 1, 1), test::rec(1, 0, 0)};
  auto w = weights_for(r, s);
  EXPECT_DOUBLE_EQ(w.weights[0], 2.0);
  EXPECT_DOUBLE_EQ(w.weights[1], 2.0);
  EXPECT_EQ(w.clamped, 0u);

  s.coef = {std::log(0.25 / 0.75)};
  w = weights_for(r, s);
  EXPECT_NEAR(w.weights[0], 4.0, 1e-12);
  EXPECT_NEAR(w.weights[1], 4.0 / 3.0, 1e-12);

  s.coef = {std::log(0.001 / 0.999)};
  w = weights_for(r, s);
  EXPECT_NEAR(w.propensity[0], 0.01, 1e-12);
  EXPECT_NEAR(w.weights[0], 100.0, 1e-9);
  EXPECT_EQ(w.clamped, 2u);

  r.push_back(test::rec(1, 0));
  EXPECT_THROW(weights_for(r, s), ValidationError);
}

TEST(Weights, BalanceCovariates) {
  auto r = logistic_data(2000, {0.0, 0.5, 0.5}, 40);
  const auto s = propensity_init(r);
  const auto w = weights_for(r, s);
  for (std::size_t j = 0; j < 2; ++j) {
    double sw[2] = {0, 0}, m[2] = {0, 0}, all = 0, all2 = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const int a = *r[i].arm;
      sw[a] += w.weights[i];
      m[a] += w.weights[i] * r[i].covariates[j];
      all += r[i].covariates[j];
      all2 += r[i].covariates[j] * r[i].covariates[j];
    }
    const double n = static_cast<double>(r.size());
    const double sd = std::sqrt(all2 / n - (all / n) * (all / n));
    EXPECT_LT(std::abs(m[1] / sw[1] - m[0] / sw[0]) / sd, 0.1);
  }
}
