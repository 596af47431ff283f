#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dkm {

enum class Link { logit, cloglog };

std::string to_string(Link link);
Link link_from_string(const std::string& name);

/// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] before the
/// link transform.
inline constexpr double kProbFloor = 1e-6;
inline constexpr std::size_t kDefaultGridSize = 200;
inline constexpr int kMaxDegree = 7;

double clamp_probability(double p);
double link_forward(Link link, double p);
double link_inverse(Link link, double eta);

/// Shareable curve state: knots, degree, link, survival and at-risk
/// coefficients and the number of observations absorbed so far.
struct SplineParams {
  std::vector<double> knots;
  int degree = 3;
  Link link = Link::logit;
  double t_max = 1.0;
  std::vector<double> beta_surv;
  std::vector<double> beta_atrisk;
  std::int64_t n_cum = 0;

  std::size_t basis_dimension() const { return knots.size() + static_cast<std::size_t>(degree) + 1; }

  /// Throws ProtocolError with a field path relative to `prefix`.
  void validate(const std::string& prefix = "") const;

  friend bool operator==(const SplineParams&, const SplineParams&) = default;
};

/// Clamped B-spline basis of the given degree on [0, t_max].
class BSplineBasis {
 public:
  BSplineBasis(std::span<const double> interior_knots, int degree, double t_max);

  std::size_t dimension() const { return dimension_; }
  int degree() const { return degree_; }
  double t_max() const { return t_max_; }
  std::span<const double> full_knots() const { return full_; }

  /// The `degree + 1` possibly nonzero basis functions at t start at `first`.
  struct Local {
    std::size_t first = 0;
    std::array<double, kMaxDegree + 1> value{};
    std::array<double, kMaxDegree + 1> deriv{};
  };

  /// Throws DomainError when t lies outside [0, t_max].
  void evaluate_local(double t, Local& out) const;

  std::vector<double> evaluate(double t) const;
  std::vector<double> derivative(double t) const;

 private:
  std::size_t find_span(double t) const;

  std::vector<double> full_;
  int degree_;
  double t_max_;
  std::size_t dimension_;
};

/// Dense basis values (B-spline) at t for the given interior knots.
std::vector<double> basis_eval(double t, std::span<const double> knots, int degree, double t_max);

std::vector<double> default_grid(double t_max, std::size_t count = kDefaultGridSize);

struct SplineFit {
  std::vector<double> coef;
  /// Root mean square of g^{-1}(fit) - value over the grid.
  double residual_rms = 0.0;
};

/// Design matrix for one (grid, knots, degree) triple, built and rank-checked
/// once and reused across refits.
class GridDesign {
 public:
  GridDesign(std::vector<double> grid, std::span<const double> knots, int degree, double t_max);

  const std::vector<double>& grid() const { return grid_; }
  std::size_t dimension() const { return basis_.dimension(); }

  /// Fits g^{-1}(basis * coef) to the values by least squares on the
  /// probability scale. Values must lie strictly inside (0, 1).
  SplineFit fit(std::span<const double> values, Link link) const;

  /// Link-scale predictions of a coefficient vector on the grid.
  Eigen::VectorXd predict_linear(std::span<const double> coef) const;

 private:
  std::vector<double> grid_;
  BSplineBasis basis_;
  Eigen::MatrixXd design_;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
};

SplineFit fit_spline(std::span<const double> grid_times, std::span<const double> grid_values,
                     std::span<const double> knots, int degree, Link link, double t_max);

/// Survival, at-risk, hazard and S' at one time.
struct CurvePoint {
  double survival = 1.0;
  double at_risk = 1.0;
  double hazard = 0.0;
  double survival_deriv = 0.0;
};

/// Evaluators derived from a SplineParams: S = g^{-1}(beta' I(t)),
/// Y = g^{-1}(alpha' I(t)), lambda = -S'/S.
class CurveView {
 public:
  explicit CurveView(SplineParams params);

  const SplineParams& params() const { return params_; }
  const BSplineBasis& basis() const { return basis_; }
  double t_max() const { return params_.t_max; }

  CurvePoint evaluate(double t) const;
  double survival(double t) const { return evaluate(t).survival; }
  double at_risk(double t) const { return evaluate(t).at_risk; }
  double hazard(double t) const { return evaluate(t).hazard; }
  double survival_deriv(double t) const { return evaluate(t).survival_deriv; }

  /// Largest grid time whose at-risk value is still >= floor. The grid is
  /// scanned from the left; returns 0 if Y(0) is already below the floor.
  double support_limit(double floor, std::size_t grid_size = 2000) const;

  /// -log S(0): hazard mass the fitted curve has already shed at the origin.
  /// Integrals of the hazard from 0 add it as an atom at t = 0.
  double origin_mass() const;

 private:
  SplineParams params_;
  BSplineBasis basis_;
};

/// Refits both curves of `params` onto a new knot set / degree using the
/// default grid. n_cum is preserved.
SplineParams augment_knots(const SplineParams& params, std::span<const double> new_knots,
                           int new_degree);

/// Interior knots at equally spaced quantiles of the follow-up times that
/// fall in [0, t_max].
std::vector<double> quantile_knots(std::span<const double> times, std::size_t count, double t_max);

/// Interior knots at equally spaced quantiles of the follow-up distribution
/// implied by the at-risk curve, restricted to [0, t_max].
std::vector<double> quantile_knots(const CurveView& view, std::size_t count);

}  // namespace dkm
