#include "dkm/propensity.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dkm/error.hpp"

namespace dkm {

namespace {

std::string join(const std::string& prefix, const std::string& field) {
  return prefix.empty() ? field : prefix + "." + field;
}

double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Design {
  Eigen::MatrixXd x;
  Eigen::VectorXd a;
};

Design make_design(std::span<const SurvivalRecord> records, std::size_t expected_dim) {
  Design d;
  const auto n = static_cast<Eigen::Index>(records.size());
  const std::size_t p = records.empty() ? expected_dim - 1 : records.front().covariates.size();
  if (expected_dim != 0 && p + 1 != expected_dim) {
    throw ValidationError("propensity: covariate dimension " + std::to_string(p) +
                          " does not match the model (" + std::to_string(expected_dim - 1) + ")");
  }
  d.x.resize(n, static_cast<Eigen::Index>(p + 1));
  d.a.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    if (!r.arm) throw ValidationError("propensity: record " + std::to_string(i) + " has no arm");
    if (r.covariates.size() != p) {
      throw ValidationError("propensity: record " + std::to_string(i) +
                            " has inconsistent covariate length");
    }
    d.x(i, 0) = 1.0;
    for (std::size_t j = 0; j < p; ++j) d.x(i, static_cast<Eigen::Index>(j + 1)) = r.covariates[j];
    d.a(i) = *r.arm == 1 ? 1.0 : 0.0;
  }
  return d;
}

void score_info(const Design& d, const Eigen::VectorXd& beta, Eigen::VectorXd& score,
                Eigen::MatrixXd& info) {
  const Eigen::VectorXd eta = d.x * beta;
  Eigen::VectorXd mu(eta.size()), w(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    mu(i) = expit(eta(i));
    w(i) = mu(i) * (1.0 - mu(i));
  }
  score = d.x.transpose() * (d.a - mu);
  info = d.x.transpose() * w.asDiagonal() * d.x;
}

// Newton iteration on J_prev (b_prev - b) + U(b) = 0. With J_prev = 0 this
// is the ordinary MLE.
Eigen::VectorXd solve(const Design& d, const Eigen::MatrixXd& j_prev, const Eigen::VectorXd& b_prev,
                      const NewtonOptions& options) {
  Eigen::VectorXd beta = b_prev;
  Eigen::VectorXd u;
  Eigen::MatrixXd info;
  for (int iter = 0; iter < options.max_iter; ++iter) {
    score_info(d, beta, u, info);
    const Eigen::VectorXd g = j_prev * (b_prev - beta) + u;
    if (g.norm() <= options.score_tol) return beta;
    const Eigen::MatrixXd h = j_prev + info;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-12 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
      throw NumericError("propensity: information matrix is singular (rank-deficient design)");
    }
    beta += ldlt.solve(g);
    if (!beta.allFinite() || beta.lpNorm<Eigen::Infinity>() > options.max_abs_coef) {
      throw ConvergenceError("propensity: coefficients diverge (separation between arms)");
    }
  }
  score_info(d, beta, u, info);
  if ((j_prev * (b_prev - beta) + u).norm() <= options.score_tol) return beta;
  throw ConvergenceError("propensity: Newton iteration did not converge in " +
                         std::to_string(options.max_iter) + " iterations");
}

void check_rank(const Design& d) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.x);
  if (qr.rank() < d.x.cols()) {
    throw ValidationError("propensity: design matrix is rank deficient (rank " +
                          std::to_string(qr.rank()) + " < " + std::to_string(d.x.cols()) + ")");
  }
}

PropensityState make_state(const Eigen::VectorXd& beta, const Eigen::MatrixXd& info,
                           std::int64_t n) {
  PropensityState s;
  s.coef.assign(beta.data(), beta.data() + beta.size());
  const Eigen::MatrixXd sym = 0.5 * (info + info.transpose());
  s.cum_info.resize(static_cast<std::size_t>(sym.size()));
  for (Eigen::Index r = 0; r < sym.rows(); ++r) {
    for (Eigen::Index c = 0; c < sym.cols(); ++c) {
      s.cum_info[static_cast<std::size_t>(r * sym.cols() + c)] = sym(r, c);
    }
  }
  s.n_cum = n;
  return s;
}

}  // namespace

Eigen::MatrixXd PropensityState::info_matrix() const {
  const auto p = static_cast<Eigen::Index>(coef.size());
  Eigen::MatrixXd m(p, p);
  for (Eigen::Index r = 0; r < p; ++r) {
    for (Eigen::Index c = 0; c < p; ++c) m(r, c) = cum_info[static_cast<std::size_t>(r * p + c)];
  }
  return m;
}

void PropensityState::validate(const std::string& prefix) const {
  if (coef.empty()) throw ProtocolError(join(prefix, "coef"), "must not be empty");
  for (double c : coef) {
    if (!std::isfinite(c)) throw ProtocolError(join(prefix, "coef"), "non-finite coefficient");
  }
  if (cum_info.size() != coef.size() * coef.size()) {
    throw ProtocolError(join(prefix, "cum_info"), "size must be dim^2");
  }
  const std::size_t p = coef.size();
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < p; ++c) {
      const double a = cum_info[r * p + c], b = cum_info[c * p + r];
      if (!std::isfinite(a)) throw ProtocolError(join(prefix, "cum_info"), "non-finite entry");
      if (std::abs(a - b) > 1e-9 * (1.0 + std::abs(a))) {
        throw ProtocolError(join(prefix, "cum_info"), "matrix is not symmetric");
      }
    }
  }
  if (n_cum < 0) throw ProtocolError(join(prefix, "n_cum"), "must be nonnegative");
}

PropensityState propensity_init(std::span<const SurvivalRecord> records,
                                const NewtonOptions& options) {
  if (records.empty()) throw ValidationError("propensity: no records");
  const Design d = make_design(records, 0);
  const double treated = d.a.sum();
  if (treated == 0.0 || treated == static_cast<double>(d.a.size())) {
    throw ValidationError("propensity: both arms must be present at the first site");
  }
  check_rank(d);
  const auto p = d.x.cols();
  const Eigen::VectorXd beta =
      solve(d, Eigen::MatrixXd::Zero(p, p), Eigen::VectorXd::Zero(p), options);
  Eigen::VectorXd u;
  Eigen::MatrixXd info;
  score_info(d, beta, u, info);
  return make_state(beta, info, static_cast<std::int64_t>(records.size()));
}

PropensityState propensity_update(const PropensityState& state,
                                  std::span<const SurvivalRecord> records,
                                  const NewtonOptions& options) {
  if (records.empty()) return state;
  const Design d = make_design(records, state.dimension());
  const Eigen::Map<const Eigen::VectorXd> prev(state.coef.data(),
                                               static_cast<Eigen::Index>(state.coef.size()));
  const Eigen::MatrixXd j_prev = state.info_matrix();
  const Eigen::VectorXd beta = solve(d, j_prev, prev, options);
  Eigen::VectorXd u;
  Eigen::MatrixXd info;
  score_info(d, beta, u, info);
  return make_state(beta, j_prev + info, state.n_cum + static_cast<std::int64_t>(records.size()));
}

std::vector<double> logistic_mle(std::span<const SurvivalRecord> records,
                                 const NewtonOptions& options) {
  return propensity_init(records, options).coef;
}

double propensity_score(const PropensityState& state, const SurvivalRecord& record) {
  if (record.covariates.size() + 1 != state.coef.size()) {
    throw ValidationError("propensity: covariate dimension does not match the model");
  }
  double eta = state.coef[0];
  for (std::size_t j = 0; j < record.covariates.size(); ++j) {
    eta += state.coef[j + 1] * record.covariates[j];
  }
  return expit(eta);
}

WeightResult weights_for(std::span<const SurvivalRecord> records, const PropensityState& state) {
  WeightResult out;
  out.weights.reserve(records.size());
  out.propensity.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.arm) throw ValidationError("weights: record " + std::to_string(i) + " has no arm");
    double p = propensity_score(state, r);
    if (p < kPropensityFloor || p > kPropensityCeiling) {
      ++out.clamped;
      p = std::clamp(p, kPropensityFloor, kPropensityCeiling);
    }
    out.propensity.push_back(p);
    out.weights.push_back(*r.arm == 1 ? 1.0 / p : 1.0 / (1.0 - p));
  }
  return out;
}

}  // namespace dkm
