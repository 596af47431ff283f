#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "dkm/error.hpp"
#include "dkm/federation.hpp"
#include "dkm/influence.hpp"
#include "support.hpp"

using namespace dkm;

namespace {

FederationConfig base_config() {
  FederationConfig cfg;
  cfg.t_max = 22.0;
  cfg.eval_times = {4.3, 6.5, 10.4, 18.0};
  return cfg;
}

std::vector<std::size_t> ten_sizes() { return {150, 40, 90, 60, 110, 70, 80, 50, 100, 50}; }

}  // namespace

TEST(Federation, SingleSiteEqualsLocalFit) {
  const auto r = test::exponential_data(300, 15.0, 0.03, 1, true);
  const auto cfg = base_config();
  const auto res = run_unweighted(test::split_sites(r, {300}), cfg);
  std::vector<double> x;
  for (const auto& s : r) x.push_back(s.time);
  const auto local = fit_initial(r, quantile_knots(x, 9, 22.0), 3, Link::logit, 22.0);
  EXPECT_EQ(res.group(Group::overall).params, local);
  EXPECT_TRUE(res.logrank.has_value());
  EXPECT_EQ(res.diagnostics.updates, 0);
}

TEST(Federation, TenSitesMatchPooledKm) {
  const auto r = test::exponential_data(800, 15.0, 0.03, 2, true);
  const auto res = run_unweighted(test::split_sites(r, ten_sizes()), base_config());
  const auto km = km_fit(r);
  const auto& p = res.group(Group::overall).params;
  const CurveView v(p);
  for (double t : base_config().eval_times) EXPECT_LT(std::abs(v.survival(t) - km(t)), 0.02) << t;
  EXPECT_EQ(p.n_cum, 800);
  EXPECT_EQ(res.accumulators.count[index(Group::overall)], 800);
  EXPECT_EQ(res.accumulators.count[index(Group::arm0)] + res.accumulators.count[index(Group::arm1)], 800);
  for (const auto& ci : res.group(Group::overall).intervals) {
    EXPECT_LE(ci.lower, ci.estimate);
    EXPECT_GE(ci.upper, ci.estimate);
  }
}

TEST(Federation, SingletonSiteShiftIsBounded) {
  const auto r = test::exponential_data(401, 15.0, 0.03, 3, true);
  auto sites = test::split_sites(r, {400, 1});
  sites[1].records[0].event = 0;
  sites[1].records[0].time = 7.0;
  const auto cfg = base_config();
  const auto before = run_unweighted({sites[0]}, cfg);
  const auto after = run_unweighted(sites, cfg);
  const auto& a = before.group(Group::overall).params;
  const auto& b = after.group(Group::overall).params;
  EXPECT_EQ(b.n_cum, 401);
  EXPECT_LE(test::sup_norm(a, b), 1.0 / 401.0 + 1e-4);
}

TEST(Federation, SiteOrderRobust) {
  const auto r = test::exponential_data(800, 15.0, 0.03, 4, true);
  auto sites = test::split_sites(r, ten_sizes());
  std::mt19937_64 rng(5);
  std::vector<SplineParams> curves;
  while (curves.size() < 2) {
    std::shuffle(sites.begin(), sites.end(), rng);
    if (sites.front().records.size() < 60) continue;
    curves.push_back(run_unweighted(sites, base_config()).group(Group::overall).params);
  }
  EXPECT_LT(test::sup_norm(curves[0], curves[1]), 0.01);
}

TEST(Federation, Deterministic) {
  const auto r = test::exponential_data(500, 15.0, 0.03, 6, true);
  const auto sites = test::split_sites(r, {200, 150, 150});
  const auto a = run_unweighted(sites, base_config());
  const auto b = run_unweighted(sites, base_config());
  EXPECT_EQ(a.group(Group::overall).params, b.group(Group::overall).params);
  EXPECT_EQ(a.accumulators, b.accumulators);
}

TEST(Federation, SmallFirstSiteAsksForReordering) {
  const auto r = test::exponential_data(300, 15.0, 0.03, 7, true);
  try {
    run_unweighted(test::split_sites(r, {30, 270}), base_config());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("reorder"), std::string::npos);
  }
  auto sites = test::split_sites(r, {100, 200});
  for (auto& x : sites[0].records) {
    if (x.arm == 1) x.event = 0;
  }
  try {
    run_unweighted(sites, base_config());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("arm1"), std::string::npos);
  }
}

TEST(Federation, EmptyOrBadInputsRejected) {
  EXPECT_THROW(run_unweighted({}, base_config()), ValidationError);
  auto cfg = base_config();
  cfg.eval_times = {30.0};
  const auto r = test::exponential_data(300, 15.0, 0.03, 8, true);
  EXPECT_THROW(run_unweighted(test::split_sites(r, {300}), cfg), ValidationError);
  cfg = base_config();
  cfg.batch_size = 0;
  EXPECT_THROW(run_unweighted(test::split_sites(r, {300}), cfg), ValidationError);
  EXPECT_THROW(run_ipw(test::split_sites(r, {300}), base_config()), ValidationError);
}

TEST(Federation, KnotGrowth) {
  const auto r = test::exponential_data(800, 15.0, 0.03, 9, true);
  auto cfg = base_config();
  cfg.knots = 12;
  const auto res = run_unweighted(test::split_sites(r, {200, 600}), cfg);
  EXPECT_EQ(res.group(Group::overall).params.knots.size(), 12u);
  EXPECT_EQ(res.diagnostics.knot_growths, 3);
  EXPECT_EQ(initial_knot_count(cfg, 1000), 9u);
  EXPECT_EQ(initial_knot_count(cfg, 1001), 12u);
}

TEST(Federation, BatchFractionMode) {
  const auto r = test::exponential_data(800, 15.0, 0.03, 10, true);
  auto cfg = base_config();
  const auto a = run_unweighted(test::split_sites(r, ten_sizes()), cfg);
  cfg.batch_fraction = 0.03;
  const auto b = run_unweighted(test::split_sites(r, ten_sizes()), cfg);
  EXPECT_LT(b.diagnostics.updates, a.diagnostics.updates);
  EXPECT_LT(test::sup_norm(a.group(Group::overall).params, b.group(Group::overall).params), 5e-3);
}

TEST(Federation, UninformativeCovariateNearUnweighted) {
  auto r = test::exponential_data(800, 15.0, 0.03, 11, true);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> z;
  for (auto& x : r) x.covariates = {z(rng)};
  const auto sites = test::split_sites(r, ten_sizes());
  const auto u = run_unweighted(sites, base_config());
  const auto w = run_ipw(sites, base_config());
  for (Group g : kAllGroups) {
    EXPECT_LT(test::sup_norm(u.group(g).params, w.group(g).params), 0.01) << to_string(g);
  }
  ASSERT_TRUE(w.weighted_logrank.has_value());
}

TEST(Federation, IpwRequiresCovariates) {
  const auto r = test::exponential_data(300, 15.0, 0.03, 12, true);
  EXPECT_THROW(run_ipw(test::split_sites(r, {200, 100}), base_config()), ValidationError);
}

TEST(Federation, IpwWeightedCurveNearWeightedKm) {
  auto r = test::exponential_data(1000, 15.0, 0.03, 13, true);
  test::add_confounded_arms(r, 14);
  const auto res = run_ipw(test::split_sites(r, {300, 200, 250, 250}), base_config());
  ASSERT_TRUE(res.propensity.has_value());
  auto pooled = r;
  const auto w = weights_for(r, *res.propensity);
  for (std::size_t i = 0; i < r.size(); ++i) pooled[i].weight = w.weights[i];
  EXPECT_LT(test::sup_norm_vs_km(res.group(Group::overall).params, km_fit_weighted(pooled)), 0.03);
  for (const auto& ci : res.group(Group::overall).intervals) {
    EXPECT_GT(ci.variance, 0.0);
    EXPECT_GE(ci.lower, 0.0);
    EXPECT_LE(ci.upper, 1.0);
  }
}

TEST(Federation, SitesOnlyExchangeBytes) {
  const auto r = test::exponential_data(300, 15.0, 0.03, 15, true);
  auto sites = test::split_sites(r, {200, 100});
  for (auto& s : sites) {
    for (auto& x : s.records) x.covariates = {x.time};
  }
  const Site first(sites[0], base_config());
  const Site second(sites[1], base_config());
  const std::string m1 = first.start_curves("");
  const std::string m2 = second.continue_curves(m1);
  EXPECT_EQ(deserialize_message(m2).params(Group::overall).n_cum, 300);
  EXPECT_THROW(second.continue_curves("{}"), ProtocolError);
  EXPECT_THROW(first.continue_propensity(m1), ProtocolError);
}
