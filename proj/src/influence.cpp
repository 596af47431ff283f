#include "dkm/influence.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dkm/error.hpp"

namespace dkm {

void UpdateDiagnostics::merge(const UpdateDiagnostics& other) {
  updates += other.updates;
  non_monotone += other.non_monotone;
  max_fit_rms = std::max(max_fit_rms, other.max_fit_rms);
}

InfluenceEvaluator::InfluenceEvaluator(const CurveView& view, std::vector<double> eval_times,
                                       std::span<const double> record_times,
                                       const IntegrationPolicy& policy)
    : view_(view), policy_(policy), eval_times_(std::move(eval_times)) {
  const double tm = view_.t_max();
  support_ = view_.support_limit(kSupportFloor);

  survival_.resize(eval_times_.size());
  at_risk_.resize(eval_times_.size());
  for (std::size_t i = 0; i < eval_times_.size(); ++i) {
    if (eval_times_[i] < 0.0 || eval_times_[i] > tm * (1.0 + 1e-12)) {
      throw DomainError("influence: evaluation time " + std::to_string(eval_times_[i]) +
                        " outside [0, t_max]");
    }
    const auto pt = view_.evaluate(std::min(eval_times_[i], tm));
    survival_[i] = pt.survival;
    at_risk_[i] = pt.at_risk;
  }

  nodes_.reserve(eval_times_.size() + record_times.size());
  for (double t : eval_times_) nodes_.push_back(std::min(t, support_));
  for (double x : record_times) nodes_.push_back(std::clamp(x, 0.0, support_));
  std::sort(nodes_.begin(), nodes_.end());
  nodes_.erase(std::unique(nodes_.begin(), nodes_.end()), nodes_.end());

  const Integrand ratio = [this](double u) {
    const auto pt = view_.evaluate(u);
    return pt.hazard / pt.at_risk;
  };
  origin_ = view_.origin_mass() / view_.at_risk(0.0);
  h_nodes_ = integrate_batch(ratio, nodes_, policy_);
  for (double& h : h_nodes_) h += origin_;
}

double InfluenceEvaluator::cumulative_hazard_over_risk(double s) const {
  s = std::clamp(s, 0.0, support_);
  auto it = std::upper_bound(nodes_.begin(), nodes_.end(), s);
  if (it == nodes_.begin()) {
    // Only reachable when s lies below the first node.
    const Integrand ratio = [this](double u) {
      const auto pt = view_.evaluate(u);
      return pt.hazard / pt.at_risk;
    };
    return origin_ + integrate(ratio, 0.0, s, policy_);
  }
  const auto idx = static_cast<std::size_t>(it - nodes_.begin()) - 1;
  if (nodes_[idx] == s) return h_nodes_[idx];
  const Integrand ratio = [this](double u) {
    const auto pt = view_.evaluate(u);
    return pt.hazard / pt.at_risk;
  };
  return h_nodes_[idx] + integrate(ratio, nodes_[idx], s, policy_);
}

void InfluenceEvaluator::influence(const SurvivalRecord& record, std::span<double> out) const {
  if (out.size() != eval_times_.size()) throw ValidationError("influence: output size mismatch");
  const double x = record.time;
  const bool event = record.event == 1;

  double inv_y_at_x = 0.0;
  if (event && x <= view_.t_max()) {
    const double latest = eval_times_.empty()
                              ? 0.0
                              : *std::max_element(eval_times_.begin(), eval_times_.end());
    if (x <= latest) {
      const double yx = view_.at_risk(x);
      if (yx < kSupportFloor || x > support_) {
        throw TailSupportError("event at t = " + std::to_string(x) +
                               " lies beyond the estimable at-risk support (Y = " +
                               std::to_string(yx) + ")");
      }
      inv_y_at_x = 1.0 / yx;
    }
  }
  const double h_at_x = cumulative_hazard_over_risk(x);
  for (std::size_t i = 0; i < eval_times_.size(); ++i) {
    const double t = eval_times_[i];
    const double jump = (event && x <= t) ? inv_y_at_x : 0.0;
    const double h = x < t ? h_at_x : cumulative_hazard_over_risk(t);
    out[i] = -survival_[i] * (jump - h);
  }
}

std::vector<double> InfluenceEvaluator::influence(const SurvivalRecord& record) const {
  std::vector<double> out(eval_times_.size());
  influence(record, out);
  return out;
}

SplineParams fit_initial(std::span<const SurvivalRecord> records, std::span<const double> knots,
                         int degree, Link link, double t_max, bool weighted, double* fit_rms) {
  if (records.empty()) throw ValidationError("fit_initial: no records");
  const StepCurve km = weighted ? km_fit_weighted(records) : km_fit(records);
  const auto grid = default_grid(t_max);
  std::vector<double> s(grid.size());
  for (std::size_t j = 0; j < grid.size(); ++j) s[j] = clamp_probability(km(grid[j]));
  auto y = at_risk_fraction(records, grid, weighted);
  for (double& v : y) v = clamp_probability(v);

  const GridDesign design(grid, knots, degree, t_max);
  auto fs = design.fit(s, link);
  auto fy = design.fit(y, link);
  SplineParams p;
  p.knots.assign(knots.begin(), knots.end());
  p.degree = degree;
  p.link = link;
  p.t_max = t_max;
  p.beta_surv = std::move(fs.coef);
  p.beta_atrisk = std::move(fy.coef);
  p.n_cum = static_cast<std::int64_t>(records.size());
  p.validate();
  if (fit_rms) *fit_rms = std::max(fs.residual_rms, fy.residual_rms);
  return p;
}

std::vector<double> influence_at(const SurvivalRecord& record, const SplineParams& params,
                                 std::span<const double> eval_times,
                                 const IntegrationPolicy& policy) {
  if (params.n_cum < 1) throw ValidationError("influence_at: params must have n_cum >= 1");
  const CurveView view(params);
  const double x = record.time;
  const InfluenceEvaluator eval(view, std::vector<double>(eval_times.begin(), eval_times.end()),
                                std::span<const double>(&x, 1), policy);
  return eval.influence(record);
}

SplineParams apply_batch_update(const SplineParams& params, const BatchUpdateRequest& request,
                                const IntegrationPolicy& policy,
                                std::vector<std::vector<double>>* extra_influence,
                                UpdateDiagnostics* diagnostics) {
  const auto& records = request.records;
  const std::size_t k = records.size();
  if (k == 0) throw ValidationError("update: empty batch");
  if (params.n_cum < 1) throw ValidationError("update: params must have n_cum >= 1");
  if (!request.weights.empty() && request.weights.size() != k) {
    throw ValidationError("update: weights must match records");
  }
  if (!(request.prior_weight > 0.0)) throw ValidationError("update: prior weight must be positive");
  for (std::size_t i = 0; i < k; ++i) {
    const double w = request.weights.empty() ? 1.0 : request.weights[i];
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw ValidationError("update: weights must be positive");
    }
  }
  validate_records(records);

  const CurveView view(params);
  const auto grid = default_grid(params.t_max);
  const std::size_t g = grid.size();
  std::vector<double> times(grid);
  times.insert(times.end(), request.extra_times.begin(), request.extra_times.end());
  std::vector<double> xs(k);
  for (std::size_t i = 0; i < k; ++i) xs[i] = records[i].time;
  const InfluenceEvaluator eval(view, std::move(times), xs, policy);

  std::vector<double> shift(g, 0.0);
  std::vector<double> atrisk_sum(g, 0.0);
  std::vector<double> psi(eval.eval_times().size());
  if (extra_influence) extra_influence->assign(k, {});

  double cumulative = request.prior_weight;
  double denominator = 0.0;
  double batch_weight = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double w = request.weights.empty() ? 1.0 : request.weights[i];
    eval.influence(records[i], psi);
    for (std::size_t j = 0; j < g; ++j) {
      shift[j] += w * psi[j];
      if (records[i].time > grid[j]) atrisk_sum[j] += w;
    }
    if (extra_influence) (*extra_influence)[i].assign(psi.begin() + static_cast<std::ptrdiff_t>(g), psi.end());
    cumulative += w;
    denominator += cumulative;
    batch_weight += w;
  }
  denominator /= static_cast<double>(k);

  std::vector<double> s_new(g), y_new(g);
  const double total = request.prior_weight + batch_weight;
  bool non_monotone = false;
  for (std::size_t j = 0; j < g; ++j) {
    s_new[j] = eval.survival()[j] + shift[j] / denominator;
    y_new[j] = (request.prior_weight * eval.at_risk()[j] + atrisk_sum[j]) / total;
    if (j > 0 && s_new[j] - s_new[j - 1] > kNonMonotoneTolerance) non_monotone = true;
  }
  for (std::size_t j = 0; j < g; ++j) {
    s_new[j] = clamp_probability(s_new[j]);
    y_new[j] = clamp_probability(y_new[j]);
  }

  const GridDesign design(grid, params.knots, params.degree, params.t_max);
  auto fit_s = design.fit(s_new, params.link);
  auto fit_y = design.fit(y_new, params.link);

  SplineParams out = params;
  out.beta_surv = std::move(fit_s.coef);
  out.beta_atrisk = std::move(fit_y.coef);
  out.n_cum = params.n_cum + static_cast<std::int64_t>(k);

  if (diagnostics) {
    ++diagnostics->updates;
    if (non_monotone) ++diagnostics->non_monotone;
    diagnostics->max_fit_rms = std::max({diagnostics->max_fit_rms, fit_s.residual_rms, fit_y.residual_rms});
  }
  return out;
}

SplineParams update_single(const SplineParams& params, const SurvivalRecord& record,
                           const IntegrationPolicy& policy, UpdateDiagnostics* diagnostics) {
  BatchUpdateRequest req;
  req.records = std::span<const SurvivalRecord>(&record, 1);
  req.prior_weight = static_cast<double>(params.n_cum);
  return apply_batch_update(params, req, policy, nullptr, diagnostics);
}

SplineParams update_batch(const SplineParams& params, const UpdateBatch& batch,
                          const IntegrationPolicy& policy, UpdateDiagnostics* diagnostics) {
  BatchUpdateRequest req;
  req.records = batch.records;
  req.prior_weight = static_cast<double>(params.n_cum);
  return apply_batch_update(params, req, policy, nullptr, diagnostics);
}

std::pair<SplineParams, double> update_weighted(const SplineParams& params,
                                                const SurvivalRecord& record, double weight,
                                                double cum_weight, const IntegrationPolicy& policy,
                                                UpdateDiagnostics* diagnostics) {
  if (!(weight > 0.0)) throw ValidationError("update_weighted: weight must be positive");
  if (!(cum_weight > 0.0)) throw ValidationError("update_weighted: cum_weight must be positive");
  BatchUpdateRequest req;
  req.records = std::span<const SurvivalRecord>(&record, 1);
  req.weights = std::span<const double>(&weight, 1);
  req.prior_weight = cum_weight;
  return {apply_batch_update(params, req, policy, nullptr, diagnostics), cum_weight + weight};
}

std::pair<SplineParams, double> update_weighted_batch(const SplineParams& params,
                                                      const UpdateBatch& batch, double cum_weight,
                                                      const IntegrationPolicy& policy,
                                                      UpdateDiagnostics* diagnostics) {
  if (!(cum_weight > 0.0)) throw ValidationError("update_weighted: cum_weight must be positive");
  std::vector<double> weights = batch.weights;
  if (weights.empty()) weights.assign(batch.records.size(), 1.0);
  BatchUpdateRequest req;
  req.records = batch.records;
  req.weights = weights;
  req.prior_weight = cum_weight;
  double added = 0.0;
  for (double w : weights) added += w;
  return {apply_batch_update(params, req, policy, nullptr, diagnostics), cum_weight + added};
}

}  // namespace dkm
