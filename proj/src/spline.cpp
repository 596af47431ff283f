#include "dkm/spline.hpp"

#include <algorithm>
#include <cmath>

#include "dkm/error.hpp"

namespace dkm {

std::string to_string(Link link) { return link == Link::logit ? "logit" : "cloglog"; }

Link link_from_string(const std::string& name) {
  if (name == "logit") return Link::logit;
  if (name == "cloglog") return Link::cloglog;
  throw ValidationError("unknown link '" + name + "' (expected logit or cloglog)");
}

double clamp_probability(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

double link_forward(Link link, double p) {
  if (link == Link::logit) return std::log(p / (1.0 - p));
  return std::log(-std::log(p));
}

double link_inverse(Link link, double eta) {
  if (link == Link::logit) {
    if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
  }
  return std::exp(-std::exp(eta));
}

namespace {

constexpr int kFitIterations = 30;

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::string join(const std::string& prefix, const std::string& field) {
  return prefix.empty() ? field : prefix + "." + field;
}

}  // namespace

void SplineParams::validate(const std::string& prefix) const {
  if (degree < 2 || degree > kMaxDegree) {
    throw ProtocolError(join(prefix, "degree"), "degree must lie in [2, 7]");
  }
  if (!std::isfinite(t_max) || t_max <= 0.0) {
    throw ProtocolError(join(prefix, "t_max"), "must be positive and finite");
  }
  if (!all_finite(knots)) throw ProtocolError(join(prefix, "knots"), "non-finite knot");
  for (std::size_t i = 0; i < knots.size(); ++i) {
    if (knots[i] <= 0.0 || knots[i] >= t_max) {
      throw ProtocolError(join(prefix, "knots"), "knots must lie inside (0, t_max)");
    }
    if (i > 0 && knots[i] <= knots[i - 1]) {
      throw ProtocolError(join(prefix, "knots"), "knots must be strictly increasing");
    }
  }
  const std::size_t dim = basis_dimension();
  if (beta_surv.size() != dim) {
    throw ProtocolError(join(prefix, "beta_surv"), "length does not match basis dimension");
  }
  if (beta_atrisk.size() != dim) {
    throw ProtocolError(join(prefix, "beta_atrisk"), "length does not match basis dimension");
  }
  if (!all_finite(beta_surv)) throw ProtocolError(join(prefix, "beta_surv"), "non-finite coefficient");
  if (!all_finite(beta_atrisk)) {
    throw ProtocolError(join(prefix, "beta_atrisk"), "non-finite coefficient");
  }
  if (n_cum < 0) throw ProtocolError(join(prefix, "n_cum"), "must be nonnegative");
}

// ---------------------------------------------------------------------------
// Basis

BSplineBasis::BSplineBasis(std::span<const double> interior_knots, int degree, double t_max)
    : degree_(degree), t_max_(t_max) {
  if (degree < 2 || degree > kMaxDegree) throw ValidationError("spline degree must lie in [2, 7]");
  if (!(t_max > 0.0)) throw ValidationError("spline domain upper bound must be positive");
  for (std::size_t i = 0; i < interior_knots.size(); ++i) {
    if (!(interior_knots[i] > 0.0 && interior_knots[i] < t_max)) {
      throw ValidationError("knot " + std::to_string(interior_knots[i]) + " outside (0, t_max)");
    }
    if (i > 0 && !(interior_knots[i] > interior_knots[i - 1])) {
      throw ValidationError("knots must be strictly increasing");
    }
  }
  full_.assign(static_cast<std::size_t>(degree) + 1, 0.0);
  full_.insert(full_.end(), interior_knots.begin(), interior_knots.end());
  full_.insert(full_.end(), static_cast<std::size_t>(degree) + 1, t_max);
  dimension_ = interior_knots.size() + static_cast<std::size_t>(degree) + 1;
}

std::size_t BSplineBasis::find_span(double t) const {
  const std::size_t last = dimension_ - 1;
  if (t >= full_[last + 1]) return last;
  const auto p = static_cast<std::size_t>(degree_);
  const auto it = std::upper_bound(full_.begin() + static_cast<std::ptrdiff_t>(p),
                                   full_.begin() + static_cast<std::ptrdiff_t>(last + 1), t);
  return static_cast<std::size_t>(it - full_.begin()) - 1;
}

void BSplineBasis::evaluate_local(double t, Local& out) const {
  const double slack = 1e-12 * t_max_;
  if (!(t >= -slack && t <= t_max_ + slack)) {
    throw DomainError("spline evaluation at t = " + std::to_string(t) + " outside [0, " +
                      std::to_string(t_max_) + "]");
  }
  t = std::clamp(t, 0.0, t_max_);
  const int p = degree_;
  const std::size_t span = find_span(t);
  out.first = span - static_cast<std::size_t>(p);

  std::array<double, kMaxDegree + 1> left{}, right{}, n{}, lower{};
  n[0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    if (j == p) lower = n;  // degree p - 1 values, used for the derivative
    left[j] = t - full_[span + 1 - j];
    right[j] = full_[span + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double temp = n[r] / (right[r + 1] + left[j - r]);
      n[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    n[j] = saved;
  }
  for (int r = 0; r <= p; ++r) out.value[r] = n[r];

  // N'_{k,p} = p N_{k,p-1}/(u_{k+p}-u_k) - p N_{k+1,p-1}/(u_{k+p+1}-u_{k+1})
  for (int r = 0; r <= p; ++r) {
    const std::size_t k = out.first + static_cast<std::size_t>(r);
    double d = 0.0;
    if (r >= 1) {
      const double den = full_[k + p] - full_[k];
      if (den > 0.0) d += lower[r - 1] / den;
    }
    if (r <= p - 1) {
      const double den = full_[k + p + 1] - full_[k + 1];
      if (den > 0.0) d -= lower[r] / den;
    }
    out.deriv[r] = p * d;
  }
}

std::vector<double> BSplineBasis::evaluate(double t) const {
  Local local;
  evaluate_local(t, local);
  std::vector<double> dense(dimension_, 0.0);
  for (int r = 0; r <= degree_; ++r) dense[local.first + r] = local.value[r];
  return dense;
}

std::vector<double> BSplineBasis::derivative(double t) const {
  Local local;
  evaluate_local(t, local);
  std::vector<double> dense(dimension_, 0.0);
  for (int r = 0; r <= degree_; ++r) dense[local.first + r] = local.deriv[r];
  return dense;
}

std::vector<double> basis_eval(double t, std::span<const double> knots, int degree, double t_max) {
  return BSplineBasis(knots, degree, t_max).evaluate(t);
}

std::vector<double> default_grid(double t_max, std::size_t count) {
  std::vector<double> grid(count);
  for (std::size_t i = 0; i < count; ++i) {
    grid[i] = t_max * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  grid.back() = t_max;
  return grid;
}

// ---------------------------------------------------------------------------
// Fitting

GridDesign::GridDesign(std::vector<double> grid, std::span<const double> knots, int degree,
                       double t_max)
    : grid_(std::move(grid)), basis_(knots, degree, t_max) {
  const auto dim = static_cast<Eigen::Index>(basis_.dimension());
  if (grid_.size() < basis_.dimension()) {
    throw IllConditionedFitError("spline fit: grid has fewer points than basis functions");
  }
  design_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(grid_.size()), dim);
  BSplineBasis::Local local;
  for (std::size_t i = 0; i < grid_.size(); ++i) {
    basis_.evaluate_local(grid_[i], local);
    for (int r = 0; r <= degree; ++r) {
      design_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(local.first) + r) =
          local.value[r];
    }
  }
  qr_.compute(design_);
  if (qr_.rank() < dim) {
    // Name the first knot span without grid support.
    const auto full = basis_.full_knots();
    for (std::size_t s = static_cast<std::size_t>(degree); s + 1 < full.size(); ++s) {
      const double a = full[s], b = full[s + 1];
      if (!(b > a)) continue;
      const bool covered = std::any_of(grid_.begin(), grid_.end(),
                                       [&](double g) { return g >= a && g <= b; });
      if (!covered) {
        throw IllConditionedFitError("spline fit is rank deficient: knot span [" +
                                     std::to_string(a) + ", " + std::to_string(b) +
                                     ") contains no grid points");
      }
    }
    throw IllConditionedFitError("spline fit is rank deficient (rank " +
                                 std::to_string(qr_.rank()) + " < " + std::to_string(dim) + ")");
  }
}

SplineFit GridDesign::fit(std::span<const double> values, Link link) const {
  if (values.size() != grid_.size()) throw ValidationError("spline fit: values/grid size mismatch");
  const auto n = static_cast<Eigen::Index>(values.size());
  Eigen::VectorXd y(n), eta(n);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] > 0.0 && values[i] < 1.0)) {
      throw ValidationError("spline fit: grid value " + std::to_string(values[i]) +
                            " not strictly inside (0, 1)");
    }
    y(static_cast<Eigen::Index>(i)) = values[i];
    eta(static_cast<Eigen::Index>(i)) = link_forward(link, values[i]);
  }

  // Least squares on the probability scale by Gauss-Newton, started from
  // least squares on the link scale and step-halved on the residual sum.
  const auto rss = [&](const Eigen::VectorXd& lin) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double r = clamp_probability(link_inverse(link, lin(i))) - y(i);
      sum += r * r;
    }
    return sum;
  };
  Eigen::VectorXd beta = qr_.solve(eta);
  eta = design_ * beta;
  double loss = rss(eta);
  Eigen::VectorXd z(n), sw(n);
  for (int iter = 0; iter < kFitIterations; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mu = clamp_probability(link_inverse(link, eta(i)));
      const double e = link_forward(link, mu);
      const double d = link == Link::logit ? mu * (1.0 - mu) : -mu * std::exp(e);
      z(i) = e + (y(i) - mu) / d;
      sw(i) = std::abs(d);
    }
    const Eigen::MatrixXd wx = sw.asDiagonal() * design_;
    const Eigen::VectorXd target = wx.colPivHouseholderQr().solve(sw.cwiseProduct(z));
    if (!target.allFinite()) break;
    const Eigen::VectorXd delta = target - beta;
    double step = 1.0;
    Eigen::VectorXd trial = beta + delta;
    Eigen::VectorXd trial_eta = design_ * trial;
    double trial_loss = rss(trial_eta);
    while (trial_loss > loss && step > 1e-8) {
      step *= 0.5;
      trial = beta + step * delta;
      trial_eta = design_ * trial;
      trial_loss = rss(trial_eta);
    }
    if (trial_loss > loss) break;
    const double moved = step * delta.lpNorm<Eigen::Infinity>();
    beta = std::move(trial);
    eta = std::move(trial_eta);
    const double gain = loss - trial_loss;
    loss = trial_loss;
    if (moved <= 1e-10 * (1.0 + beta.lpNorm<Eigen::Infinity>()) || gain <= 1e-15 * (1.0 + loss)) break;
  }

  double ss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = link_inverse(link, eta(i)) - y(i);
    ss += r * r;
  }
  SplineFit out;
  out.coef.assign(beta.data(), beta.data() + beta.size());
  out.residual_rms = std::sqrt(ss / static_cast<double>(n));
  return out;
}

Eigen::VectorXd GridDesign::predict_linear(std::span<const double> coef) const {
  const Eigen::Map<const Eigen::VectorXd> b(coef.data(), static_cast<Eigen::Index>(coef.size()));
  return design_ * b;
}

SplineFit fit_spline(std::span<const double> grid_times, std::span<const double> grid_values,
                     std::span<const double> knots, int degree, Link link, double t_max) {
  GridDesign design(std::vector<double>(grid_times.begin(), grid_times.end()), knots, degree,
                    t_max);
  return design.fit(grid_values, link);
}

// ---------------------------------------------------------------------------
// Curve view

CurveView::CurveView(SplineParams params)
    : params_(std::move(params)), basis_(params_.knots, params_.degree, params_.t_max) {
  if (params_.beta_surv.size() != basis_.dimension() ||
      params_.beta_atrisk.size() != basis_.dimension()) {
    throw ValidationError("curve view: coefficient length does not match basis dimension");
  }
}

CurvePoint CurveView::evaluate(double t) const {
  BSplineBasis::Local local;
  basis_.evaluate_local(t, local);
  double eta_s = 0.0, deta_s = 0.0, eta_y = 0.0;
  const int p = params_.degree;
  for (int r = 0; r <= p; ++r) {
    const std::size_t k = local.first + static_cast<std::size_t>(r);
    eta_s += params_.beta_surv[k] * local.value[r];
    deta_s += params_.beta_surv[k] * local.deriv[r];
    eta_y += params_.beta_atrisk[k] * local.value[r];
  }
  CurvePoint out;
  out.survival = link_inverse(params_.link, eta_s);
  out.at_risk = link_inverse(params_.link, eta_y);
  if (params_.link == Link::logit) {
    // dS/deta = S(1-S); lambda = -(1-S) eta'
    out.hazard = -(1.0 - out.survival) * deta_s;
    out.survival_deriv = out.survival * (1.0 - out.survival) * deta_s;
  } else {
    // S = exp(-e^eta); lambda = e^eta eta'
    const double e = std::exp(eta_s);
    out.hazard = e * deta_s;
    out.survival_deriv = -e * out.survival * deta_s;
  }
  return out;
}

double CurveView::origin_mass() const { return std::max(-std::log(survival(0.0)), 0.0); }

double CurveView::support_limit(double floor, std::size_t grid_size) const {
  const double tm = params_.t_max;
  if (at_risk(0.0) < floor) return 0.0;
  double good = 0.0;
  for (std::size_t i = 1; i < grid_size; ++i) {
    const double t = tm * static_cast<double>(i) / static_cast<double>(grid_size - 1);
    if (at_risk(t) < floor) {
      double lo = good, hi = t;
      for (int it = 0; it < 40; ++it) {
        const double mid = 0.5 * (lo + hi);
        (at_risk(mid) >= floor ? lo : hi) = mid;
      }
      return lo;
    }
    good = t;
  }
  return tm;
}

// ---------------------------------------------------------------------------
// Knots

SplineParams augment_knots(const SplineParams& params, std::span<const double> new_knots,
                           int new_degree) {
  for (double k : new_knots) {
    if (!(k > 0.0 && k < params.t_max)) {
      throw ValidationError("augment_knots: knot " + std::to_string(k) + " outside (0, t_max)");
    }
  }
  const std::size_t new_dim = new_knots.size() + static_cast<std::size_t>(new_degree) + 1;
  if (new_dim < params.basis_dimension()) {
    throw ValidationError("augment_knots: new basis dimension is smaller than the old one");
  }
  const CurveView old(params);
  const auto grid = default_grid(params.t_max);
  std::vector<double> s(grid.size()), y(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto pt = old.evaluate(grid[i]);
    s[i] = clamp_probability(pt.survival);
    y[i] = clamp_probability(pt.at_risk);
  }
  const GridDesign design(grid, new_knots, new_degree, params.t_max);
  SplineParams out = params;
  out.knots.assign(new_knots.begin(), new_knots.end());
  out.degree = new_degree;
  out.beta_surv = design.fit(s, params.link).coef;
  out.beta_atrisk = design.fit(y, params.link).coef;
  return out;
}

namespace {

// Enforces a minimum spacing of `gap` between knots and the boundaries.
std::vector<double> space_knots(std::vector<double> knots, double t_max) {
  const std::size_t m = knots.size();
  if (m == 0) return knots;
  const double gap = std::min(3.0 * t_max / static_cast<double>(kDefaultGridSize - 1),
                              t_max / static_cast<double>(2 * (m + 1)));
  for (std::size_t i = 0; i < m; ++i) {
    const double lo = (i == 0 ? 0.0 : knots[i - 1]) + gap;
    knots[i] = std::max(knots[i], lo);
  }
  for (std::size_t i = m; i-- > 0;) {
    const double hi = (i + 1 == m ? t_max : knots[i + 1]) - gap;
    knots[i] = std::min(knots[i], hi);
  }
  return knots;
}

}  // namespace

std::vector<double> quantile_knots(std::span<const double> times, std::size_t count,
                                   double t_max) {
  std::vector<double> x;
  for (double t : times) {
    if (t <= t_max) x.push_back(t);
  }
  if (x.size() < 2) throw ValidationError("quantile_knots: fewer than two follow-up times");
  std::sort(x.begin(), x.end());
  std::vector<double> knots;
  for (std::size_t j = 1; j <= count; ++j) {
    const double q = static_cast<double>(j) / static_cast<double>(count + 1);
    const double pos = q * static_cast<double>(x.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, x.size() - 1);
    knots.push_back(x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]));
  }
  return space_knots(std::move(knots), t_max);
}

std::vector<double> quantile_knots(const CurveView& view, std::size_t count) {
  constexpr std::size_t n = 1000;
  const double tm = view.t_max();
  std::vector<double> t(n), f(n);
  double running = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = tm * static_cast<double>(i) / static_cast<double>(n - 1);
    running = std::max(running, 1.0 - view.at_risk(t[i]));
    f[i] = running;
  }
  const double f0 = f.front(), f1 = f.back();
  if (!(f1 > f0)) throw ValidationError("quantile_knots: at-risk curve is flat on the domain");
  std::vector<double> knots;
  for (std::size_t j = 1; j <= count; ++j) {
    const double target = f0 + (f1 - f0) * static_cast<double>(j) / static_cast<double>(count + 1);
    const auto it = std::lower_bound(f.begin(), f.end(), target);
    const auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - f.begin(), 1));
    const double w = f[i] > f[i - 1] ? (target - f[i - 1]) / (f[i] - f[i - 1]) : 0.0;
    knots.push_back(t[i - 1] + w * (t[i] - t[i - 1]));
  }
  return space_knots(std::move(knots), tm);
}

}  // namespace dkm
