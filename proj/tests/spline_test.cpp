#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dkm/error.hpp"
#include "dkm/message.hpp"
#include "dkm/spline.hpp"

using namespace dkm;

namespace {

std::vector<double> even_knots(std::size_t count, double t_max) {
  std::vector<double> k;
  for (std::size_t i = 1; i <= count; ++i) k.push_back(t_max * static_cast<double>(i) / static_cast<double>(count + 1));
  return k;
}

SplineParams exponential_curve(std::size_t knots, int degree, Link link, double mean = 15.0, double t_max = 30.0) {
  const auto grid = default_grid(t_max);
  std::vector<double> s, y;
  for (double t : grid) {
    s.push_back(clamp_probability(std::exp(-t / mean)));
    y.push_back(clamp_probability(std::exp(-t / 10.0)));
  }
  SplineParams p;
  p.knots = even_knots(knots, t_max);
  p.degree = degree;
  p.link = link;
  p.t_max = t_max;
  p.beta_surv = fit_spline(grid, s, p.knots, degree, link, t_max).coef;
  p.beta_atrisk = fit_spline(grid, y, p.knots, degree, link, t_max).coef;
  p.n_cum = 42;
  return p;
}

}  // namespace

TEST(Basis, LeftBoundary) {
  const std::vector<double> knots{0.5};
  const auto b = basis_eval(0.0, knots, 2, 1.0);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_DOUBLE_EQ(b[0], 1.0);
  for (std::size_t i = 1; i < b.size(); ++i) EXPECT_DOUBLE_EQ(b[i], 0.0);
  const auto e = basis_eval(1.0, knots, 2, 1.0);
  EXPECT_DOUBLE_EQ(e.back(), 1.0);
}

TEST(Basis, PartitionOfUnityAndNonnegative) {
  for (int degree : {2, 3, 5}) {
    const auto knots = even_knots(7, 12.0);
    for (int i = 0; i <= 500; ++i) {
      const double t = 12.0 * i / 500.0;
      const auto b = basis_eval(t, knots, degree, 12.0);
      EXPECT_NEAR(std::accumulate(b.begin(), b.end(), 0.0), 1.0, 1e-12);
      for (double v : b) EXPECT_GE(v, 0.0);
    }
  }
}

TEST(Basis, DerivativeMatchesFiniteDifference) {
  const auto knots = even_knots(5, 10.0);
  const BSplineBasis basis(knots, 3, 10.0);
  for (double t : {0.3, 1.7, 4.2, 6.66, 9.1}) {
    const auto d = basis.derivative(t);
    const auto up = basis.evaluate(t + 1e-6);
    const auto dn = basis.evaluate(t - 1e-6);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double fd = (up[i] - dn[i]) / 2e-6;
      EXPECT_NEAR(d[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Basis, DomainErrors) {
  const auto knots = even_knots(3, 1.0);
  EXPECT_THROW(basis_eval(-0.01, knots, 3, 1.0), DomainError);
  EXPECT_THROW(basis_eval(1.01, knots, 3, 1.0), DomainError);
  const std::vector<double> outside{0.5, 1.5};
  EXPECT_THROW(basis_eval(0.2, outside, 3, 1.0), ValidationError);
}

TEST(Link, Roundtrip) {
  for (Link link : {Link::logit, Link::cloglog}) {
    for (double p : {1e-6, 1e-4, 0.01, 0.3, 0.5, 0.77, 0.999, 1 - 1e-6}) {
      EXPECT_NEAR(link_inverse(link, link_forward(link, p)), p, 1e-12);
    }
  }
  EXPECT_EQ(clamp_probability(0.0), kProbFloor);
  EXPECT_EQ(clamp_probability(1.0), 1.0 - kProbFloor);
  EXPECT_EQ(link_from_string("cloglog"), Link::cloglog);
  EXPECT_THROW(link_from_string("probit"), ValidationError);
}

TEST(FitSpline, ConstantReproduced) {
  const auto grid = default_grid(10.0);
  const std::vector<double> half(grid.size(), 0.5);
  const auto knots = even_knots(9, 10.0);
  const auto fit = fit_spline(grid, half, knots, 3, Link::logit, 10.0);
  const BSplineBasis basis(knots, 3, 10.0);
  for (double t : grid) {
    const auto b = basis.evaluate(t);
    const double eta = std::inner_product(b.begin(), b.end(), fit.coef.begin(), 0.0);
    EXPECT_NEAR(link_inverse(Link::logit, eta), 0.5, 1e-8);
  }
}

TEST(FitSpline, ExponentialReconstruction) {
  for (Link link : {Link::logit, Link::cloglog}) {
    const auto p = exponential_curve(9, 3, link);
    const CurveView v(p);
    double worst = 0.0, away = 0.0;
    for (double t : default_grid(30.0)) {
      const double e = std::abs(v.survival(t) - std::exp(-t / 15.0));
      worst = std::max(worst, e);
      if (t >= 6.0) away = std::max(away, e);
    }
    // The link-scale curve is log-singular at the origin, so the leading
    // span carries most of the error.
    EXPECT_LT(worst, 0.015) << to_string(link);
    EXPECT_LT(away, 3e-3) << to_string(link);
  }
}

TEST(FitSpline, IdempotentRefit) {
  const auto p = exponential_curve(9, 3, Link::logit);
  const CurveView v(p);
  const auto grid = default_grid(p.t_max);
  std::vector<double> s;
  for (double t : grid) s.push_back(v.survival(t));
  const auto again = fit_spline(grid, s, p.knots, p.degree, p.link, p.t_max);
  SplineParams q = p;
  q.beta_surv = again.coef;
  const CurveView w(q);
  for (double t : grid) EXPECT_NEAR(w.survival(t), v.survival(t), 1e-10);
}

TEST(FitSpline, RankDeficiencyNamesKnotSpan) {
  std::vector<double> grid;
  for (int i = 0; i < 50; ++i) grid.push_back(0.02 * i);
  const std::vector<double> vals(grid.size(), 0.4);
  const std::vector<double> knots{2.0, 5.0, 6.0};
  try {
    fit_spline(grid, vals, knots, 3, Link::logit, 10.0);
    FAIL() << "expected a rank error";
  } catch (const IllConditionedFitError& e) {
    EXPECT_NE(std::string(e.what()).find("knot span"), std::string::npos) << e.what();
  }
  const std::vector<double> boundary(grid.size(), 1.0);
  EXPECT_THROW(fit_spline(grid, boundary, std::vector<double>{0.5}, 3, Link::logit, 1.0), ValidationError);
}

TEST(CurveView, ExponentialHazard) {
  const auto p = exponential_curve(9, 3, Link::logit);
  const CurveView v(p);
  for (double t = 7.5; t <= 27.0; t += 0.5) EXPECT_NEAR(v.hazard(t), 1.0 / 15.0, 0.06 / 15.0) << t;
}

TEST(CurveView, ConstantHasZeroHazard) {
  SplineParams p;
  p.knots = even_knots(4, 5.0);
  p.t_max = 5.0;
  p.beta_surv.assign(p.basis_dimension(), 1.3);
  p.beta_atrisk.assign(p.basis_dimension(), 0.2);
  const CurveView v(p);
  for (double t = 0.0; t <= 5.0; t += 0.25) EXPECT_NEAR(v.hazard(t), 0.0, 1e-12);
}

TEST(CurveView, HazardMatchesFiniteDifferenceBothLinks) {
  for (Link link : {Link::logit, Link::cloglog}) {
    const auto p = exponential_curve(9, 3, link, 8.0);
    const CurveView v(p);
    for (int i = 1; i <= 100; ++i) {
      const double t = 0.3 + 29.4 * i / 101.0;
      const double h = 1e-5;
      const double fd = -(std::log(v.survival(t + h)) - std::log(v.survival(t - h))) / (2 * h);
      EXPECT_NEAR(v.hazard(t), fd, 1e-5 * std::max(1.0, std::abs(fd))) << to_string(link) << " t=" << t;
      const double sfd = (v.survival(t + h) - v.survival(t - h)) / (2 * h);
      EXPECT_NEAR(v.survival_deriv(t), sfd, 1e-5 * std::max(1.0, std::abs(sfd)));
    }
  }
}

TEST(CurveView, SupportLimit) {
  const auto p = exponential_curve(9, 3, Link::logit);
  const CurveView v(p);
  EXPECT_DOUBLE_EQ(v.support_limit(1e-4), 30.0);
  const double cut = v.support_limit(0.2);
  EXPECT_NEAR(cut, 10.0 * std::log(5.0), 0.1);
  EXPECT_GE(v.at_risk(cut), 0.2 - 1e-3);
}

TEST(AugmentKnots, IdentityRefit) {
  const auto p = exponential_curve(9, 3, Link::logit);
  const auto q = augment_knots(p, p.knots, p.degree);
  const CurveView a(p), b(q);
  for (double t : default_grid(p.t_max)) {
    EXPECT_NEAR(a.survival(t), b.survival(t), 1e-12);
    EXPECT_NEAR(a.at_risk(t), b.at_risk(t), 1e-12);
  }
  EXPECT_EQ(q.n_cum, p.n_cum);
}

TEST(AugmentKnots, GrowthAndDegreeUpgrade) {
  const auto p9 = exponential_curve(9, 3, Link::logit);
  const auto p12 = augment_knots(p9, even_knots(12, 30.0), 3);
  const auto p2 = exponential_curve(9, 2, Link::logit);
  const auto p23 = augment_knots(p2, p2.knots, 3);
  for (const auto& [a, b] : {std::pair{p9, p12}, std::pair{p2, p23}}) {
    const CurveView va(a), vb(b);
    double worst = 0.0, away = 0.0;
    for (double t : default_grid(30.0)) {
      const double e = std::max(std::abs(va.survival(t) - vb.survival(t)), std::abs(va.at_risk(t) - vb.at_risk(t)));
      worst = std::max(worst, e);
      if (t >= 6.0) away = std::max(away, e);
    }
    EXPECT_LT(worst, 0.015);
    EXPECT_LT(away, 5e-3);
    EXPECT_EQ(b.n_cum, a.n_cum);
  }
  EXPECT_THROW(augment_knots(p9, std::vector<double>{31.0}, 3), ValidationError);
  EXPECT_THROW(augment_knots(p9, even_knots(3, 30.0), 3), ValidationError);
}

TEST(QuantileKnots, EquallySpacedQuantiles) {
  std::vector<double> times;
  for (int i = 1; i <= 100; ++i) times.push_back(i);
  const auto k = quantile_knots(times, 3, 200.0);
  ASSERT_EQ(k.size(), 3u);
  EXPECT_NEAR(k[0], 25.75, 1e-9);
  EXPECT_NEAR(k[1], 50.5, 1e-9);
  EXPECT_NEAR(k[2], 75.25, 1e-9);
}

TEST(SplineParams, JsonRoundtripIsBitExact) {
  auto p = exponential_curve(9, 3, Link::cloglog);
  p.beta_surv[2] = 0.1 + 0.2;
  const auto q = deserialize_spline_params(serialize_spline_params(p));
  EXPECT_EQ(p, q);
  p.knots[3] = p.knots[2];
  EXPECT_THROW(p.validate(), ProtocolError);
}
