#include "dkm/federation.hpp"

#include <algorithm>
#include <cmath>

#include "dkm/error.hpp"
#include "dkm/influence.hpp"
#include "dkm/propensity.hpp"

namespace dkm {

namespace {

constexpr std::size_t kSmallSiteKnotCap = 9;
constexpr std::size_t kSmallSiteLimit = 1000;

bool has_arms(const std::vector<SurvivalRecord>& records) {
  return !records.empty() &&
         std::all_of(records.begin(), records.end(), [](const SurvivalRecord& r) { return r.arm.has_value(); });
}

double sample_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

SiteMessage decode(const std::string& bytes, PassId expected, Method method) {
  SiteMessage msg = deserialize_message(bytes);
  if (msg.pass_id != expected) {
    throw ProtocolError("pass_id", "expected '" + to_string(expected) + "', got '" + to_string(msg.pass_id) + "'");
  }
  if (msg.method != method) {
    throw ProtocolError("method", "message is for '" + to_string(msg.method) + "' but site is configured for '" +
                                      to_string(method) + "'");
  }
  return msg;
}

void require_covariates(const SiteDataset& site) {
  for (std::size_t i = 0; i < site.records.size(); ++i) {
    const auto& r = site.records[i];
    if (!r.arm) throw ValidationError("site " + site.site_id + ": ipw mode requires an arm for every record");
    if (r.covariates.empty()) {
      throw ValidationError("site " + site.site_id + ": ipw mode requires covariate columns");
    }
  }
}

// State carried through one site's curve updates.
struct CurveState {
  std::array<std::optional<SplineParams>, kGroupCount> params;
  InferenceAccumulators acc;
  MessageDiagnostics diag;
};

void accumulate_rows(InferenceAccumulators& acc, Group g, const std::vector<std::vector<double>>& psi,
                     std::span<const double> w) {
  for (std::size_t i = 0; i < psi.size(); ++i) accumulate_influence(acc, g, psi[i], w[i]);
}

}  // namespace

void FederationConfig::validate() const {
  if (knots < 1) throw ValidationError("knots: must be >= 1");
  if (degree < 2 || degree > kMaxDegree) throw ValidationError("degree: must lie in [2, 7]");
  if (t_max && !(*t_max > 0.0)) throw ValidationError("t_max: must be positive");
  if (batch_fraction) {
    if (!(*batch_fraction > 0.0 && *batch_fraction <= 1.0)) {
      throw ValidationError("batch_fraction: must lie in (0, 1]");
    }
  } else if (batch_size < 1) {
    throw ValidationError("batch_size: must be >= 1");
  }
  for (const auto* p : {&policy, &confint_policy}) {
    if (!(p->restriction >= 0.0)) throw ValidationError("restriction: must be >= 0");
    if (!(p->abs_tol > 0.0)) throw ValidationError("integration tolerance must be positive");
  }
  for (std::size_t i = 0; i < eval_times.size(); ++i) {
    if (!(eval_times[i] >= 0.0) || (i > 0 && !(eval_times[i] > eval_times[i - 1]))) {
      throw ValidationError("eval_times: must be nonnegative and strictly increasing");
    }
  }
}

const GroupResult& StudyResult::group(Group g) const {
  const auto& r = groups[index(g)];
  if (!r) throw ValidationError("result has no '" + to_string(g) + "' curve");
  return *r;
}

std::size_t initial_knot_count(const FederationConfig& config, std::size_t first_site_records) {
  if (first_site_records <= kSmallSiteLimit) return std::min(config.knots, kSmallSiteKnotCap);
  return config.knots;
}

Site::Site(SiteDataset data, FederationConfig config) : data_(std::move(data)), config_(std::move(config)) {
  if (data_.site_id.empty()) throw ValidationError("site id must not be empty");
  if (data_.records.empty()) throw ValidationError("site " + data_.site_id + " has no records");
  validate_records(data_.records);
  config_.validate();
}

std::string Site::start_propensity() const {
  require_covariates(data_);
  SiteMessage msg;
  msg.pass_id = PassId::propensity;
  msg.method = Method::ipw;
  msg.propensity = propensity_init(data_.records);
  msg.accumulators = InferenceAccumulators::for_times(config_.eval_times);
  msg.accumulators.n_total = static_cast<std::int64_t>(size());
  msg.accumulators.n_treated = std::count_if(data_.records.begin(), data_.records.end(),
                                             [](const SurvivalRecord& r) { return r.arm == 1; });
  msg.site_trace.push_back({id(), static_cast<std::int64_t>(size()), utc_timestamp()});
  return serialize_message(msg);
}

std::string Site::continue_propensity(const std::string& incoming) const {
  require_covariates(data_);
  SiteMessage msg = decode(incoming, PassId::propensity, Method::ipw);
  if (!msg.propensity) throw ProtocolError("propensity", "missing in propensity pass");
  msg.propensity = propensity_update(*msg.propensity, data_.records);
  msg.accumulators.n_total += static_cast<std::int64_t>(size());
  msg.accumulators.n_treated += std::count_if(data_.records.begin(), data_.records.end(),
                                              [](const SurvivalRecord& r) { return r.arm == 1; });
  msg.site_trace.push_back({id(), static_cast<std::int64_t>(size()), utc_timestamp()});
  return serialize_message(msg);
}

std::vector<double> Site::weights(const SiteMessage& msg, std::int64_t* clamped) const {
  if (config_.method != Method::ipw || config_.force_unit_weights) {
    return std::vector<double>(size(), 1.0);
  }
  if (!msg.propensity) throw ProtocolError("propensity", "required in ipw mode");
  auto w = weights_for(data_.records, *msg.propensity);
  if (clamped) *clamped += static_cast<std::int64_t>(w.clamped);
  return w.weights;
}

std::string Site::start_curves(const std::string& broadcast) const {
  const bool ipw = config_.method == Method::ipw;
  SiteMessage msg;
  if (ipw) {
    require_covariates(data_);
    const SiteMessage pass1 = decode(broadcast, PassId::propensity, Method::ipw);
    msg.propensity = pass1.propensity;
    msg.accumulators = pass1.accumulators;
    for (auto& v : msg.accumulators.sum_w2_psi2_surv) v.assign(config_.eval_times.size(), 0.0);
  } else {
    msg.accumulators = InferenceAccumulators::for_times(config_.eval_times);
  }
  msg.pass_id = PassId::curves;
  msg.method = config_.method;

  const auto& recs = data_.records;
  const std::size_t events = std::count_if(recs.begin(), recs.end(), [](const SurvivalRecord& r) { return r.event == 1; });
  if (recs.size() < config_.min_first_site_records || events < config_.min_first_site_events) {
    throw ValidationError("first site " + id() + " is too small to initialise the curves (" +
                          std::to_string(recs.size()) + " records, " + std::to_string(events) +
                          " events; need " + std::to_string(config_.min_first_site_records) + " and " +
                          std::to_string(config_.min_first_site_events) + "): reorder the sites");
  }
  const bool arms = has_arms(recs);
  if (ipw && !arms) throw ValidationError("ipw mode requires arms");

  std::vector<double> times;
  times.reserve(recs.size());
  for (const auto& r : recs) times.push_back(r.time);
  const double longest = *std::max_element(times.begin(), times.end());
  double t_max = config_.t_max ? std::min(*config_.t_max, longest) : sample_quantile(times, 0.9);
  if (!(t_max > 0.0)) throw ValidationError("first site follow-up times are all zero");
  for (double t : config_.eval_times) {
    if (t > t_max) {
      throw ValidationError("eval_times: " + std::to_string(t) + " lies beyond the curve domain [0, " +
                            std::to_string(t_max) + "]");
    }
  }
  const auto knots = quantile_knots(times, initial_knot_count(config_, recs.size()), t_max);

  std::int64_t clamped = 0;
  const auto w = weights(msg, &clamped);
  msg.diagnostics.propensity_clamped += clamped;

  std::vector<SurvivalRecord> weighted(recs);
  for (std::size_t i = 0; i < weighted.size(); ++i) weighted[i].weight = w[i];

  std::array<std::vector<std::size_t>, kGroupCount> members;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    members[index(Group::overall)].push_back(i);
    if (arms) members[index(*recs[i].arm == 1 ? Group::arm1 : Group::arm0)].push_back(i);
  }

  for (Group g : kAllGroups) {
    if (!arms && g != Group::overall) continue;
    const auto& idx = members[index(g)];
    std::vector<SurvivalRecord> sub;
    for (std::size_t i : idx) sub.push_back(weighted[i]);
    const bool any_event = std::any_of(sub.begin(), sub.end(), [](const SurvivalRecord& r) { return r.event == 1; });
    if (!any_event) {
      throw ValidationError("first site " + id() + ": group " + to_string(g) +
                            " has no events, so its curve cannot be initialised: reorder the sites");
    }
    SplineParams p = fit_initial(sub, knots, config_.degree, config_.link, t_max, ipw);
    const CurveView view(p);
    std::vector<double> xs;
    for (const auto& r : sub) xs.push_back(r.time);
    const InfluenceEvaluator eval(view, config_.eval_times, xs, config_.policy);
    std::vector<double> psi(config_.eval_times.size());
    for (const auto& r : sub) {
      eval.influence(r, psi);
      accumulate_influence(msg.accumulators, g, psi, r.weight);
    }
    msg.group_params[index(g)] = std::move(p);
  }

  if (ipw) {
    const LogRankInfluence lr(*msg.group_params[index(Group::arm1)], *msg.group_params[index(Group::overall)],
                              msg.accumulators.treated_fraction(), times, config_.policy);
    for (const auto& r : weighted) {
      const double v = lr(r);
      msg.accumulators.sum_w2_psi2_logrank += r.weight * r.weight * v * v;
    }
  }
  msg.site_trace.push_back({id(), static_cast<std::int64_t>(size()), utc_timestamp()});
  return serialize_message(msg);
}

std::string Site::continue_curves(const std::string& incoming) const {
  const bool ipw = config_.method == Method::ipw;
  SiteMessage msg = decode(incoming, PassId::curves, config_.method);
  if (ipw) require_covariates(data_);
  const bool arms = msg.group_params[index(Group::arm0)].has_value();
  if (arms && !has_arms(data_.records)) {
    throw ValidationError("site " + id() + ": records must carry an arm to update the arm curves");
  }
  if (msg.site_trace.empty()) throw ProtocolError("site_trace", "missing the first site");
  const std::int64_t first_n = msg.site_trace.front().n;

  std::int64_t clamped = 0;
  const auto w = weights(msg, &clamped);
  msg.diagnostics.propensity_clamped += clamped;

  const auto& recs = data_.records;
  const auto& times = config_.eval_times;
  std::size_t pos = 0;
  while (pos < recs.size()) {
    const SplineParams& overall = *msg.group_params[index(Group::overall)];
    std::size_t k = config_.batch_size;
    if (config_.batch_fraction) {
      k = static_cast<std::size_t>(std::llround(*config_.batch_fraction * static_cast<double>(overall.n_cum)));
    }
    k = std::clamp<std::size_t>(k, 1, recs.size() - pos);

    std::array<std::vector<SurvivalRecord>, kGroupCount> chunk;
    std::array<std::vector<double>, kGroupCount> chunk_w;
    for (std::size_t i = pos; i < pos + k; ++i) {
      chunk[index(Group::overall)].push_back(recs[i]);
      chunk_w[index(Group::overall)].push_back(w[i]);
      if (arms) {
        const Group g = *recs[i].arm == 1 ? Group::arm1 : Group::arm0;
        chunk[index(g)].push_back(recs[i]);
        chunk_w[index(g)].push_back(w[i]);
      }
    }

    if (ipw) {
      std::vector<double> xs;
      for (const auto& r : chunk[index(Group::overall)]) xs.push_back(r.time);
      const LogRankInfluence lr(*msg.group_params[index(Group::arm1)], overall,
                                msg.accumulators.treated_fraction(), xs, config_.policy);
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const double v = lr(chunk[index(Group::overall)][i]);
        const double wi = chunk_w[index(Group::overall)][i];
        msg.accumulators.sum_w2_psi2_logrank += wi * wi * v * v;
      }
    }

    std::array<std::optional<SplineParams>, kGroupCount> next;
    for (Group g : kAllGroups) {
      const auto gi = index(g);
      if (!msg.group_params[gi]) continue;
      if (chunk[gi].empty()) {
        next[gi] = msg.group_params[gi];
        continue;
      }
      const SplineParams& cur = *msg.group_params[gi];
      BatchUpdateRequest req;
      req.records = chunk[gi];
      req.weights = chunk_w[gi];
      req.prior_weight = ipw ? msg.accumulators.sum_w[gi] : static_cast<double>(cur.n_cum);
      req.extra_times = times;
      std::vector<std::vector<double>> psi;
      UpdateDiagnostics d;
      next[gi] = apply_batch_update(cur, req, config_.policy, &psi, &d);
      msg.diagnostics.updates += static_cast<std::int64_t>(d.updates);
      msg.diagnostics.non_monotone += static_cast<std::int64_t>(d.non_monotone);
      accumulate_rows(msg.accumulators, g, psi, chunk_w[gi]);
    }
    msg.group_params = std::move(next);
    pos += k;

    if (config_.knot_growth_every > 0) {
      const SplineParams& all = *msg.group_params[index(Group::overall)];
      const std::int64_t threshold =
          first_n + static_cast<std::int64_t>(config_.knot_growth_every) * (msg.diagnostics.knot_growths + 1);
      if (all.knots.size() < config_.knots && all.n_cum >= threshold) {
        const auto grown = quantile_knots(CurveView(all), all.knots.size() + 1);
        for (auto& p : msg.group_params) {
          if (p) p = augment_knots(*p, grown, p->degree);
        }
        ++msg.diagnostics.knot_growths;
      }
    }
  }
  msg.site_trace.push_back({id(), static_cast<std::int64_t>(size()), utc_timestamp()});
  return serialize_message(msg);
}

StudyResult finalize(const SiteMessage& msg, const FederationConfig& config) {
  if (msg.pass_id != PassId::curves) throw ProtocolError("pass_id", "final message must come from the curves pass");
  StudyResult out;
  out.method = msg.method;
  out.eval_times = msg.accumulators.eval_times;
  out.propensity = msg.propensity;
  out.accumulators = msg.accumulators;
  out.diagnostics = msg.diagnostics;
  out.curve_trace = msg.site_trace;
  const auto& acc = msg.accumulators;

  for (Group g : kAllGroups) {
    const auto& p = msg.group_params[index(g)];
    if (!p) continue;
    GroupResult gr;
    gr.group = g;
    gr.params = *p;
    const double sw = acc.sum_w[index(g)];
    for (std::size_t i = 0; i < out.eval_times.size(); ++i) {
      const double t = out.eval_times[i];
      gr.influence_variance.push_back(sw > 0.0 ? acc.sum_w2_psi2_surv[index(g)][i] / (sw * sw) : 0.0);
      if (msg.method == Method::ipw) {
        gr.intervals.push_back(weighted_ci(acc, g, *p, t));
      } else {
        gr.intervals.push_back(loglog_ci(*p, t, config.confint_policy));
      }
      if (gr.intervals.back().degenerate) {
        out.warnings.push_back("degenerate interval for " + to_string(g) + " at t = " + std::to_string(t));
      }
    }
    out.groups[index(g)] = std::move(gr);
  }

  if (msg.group_params[index(Group::arm0)]) {
    const auto& g0 = *msg.group_params[index(Group::arm0)];
    const auto& g1 = *msg.group_params[index(Group::arm1)];
    const auto& all = *msg.group_params[index(Group::overall)];
    double n1 = static_cast<double>(acc.count[index(Group::arm1)]);
    double n0 = static_cast<double>(acc.count[index(Group::arm0)]);
    if (msg.method == Method::ipw) {
      // Weight sums rescaled to the record count.
      const double total = static_cast<double>(acc.count[index(Group::overall)]);
      const double sw = acc.sum_w[index(Group::overall)];
      n1 = total * acc.sum_w[index(Group::arm1)] / sw;
      n0 = total * acc.sum_w[index(Group::arm0)] / sw;
    }
    try {
      out.logrank = logrank_distributed(g1, g0, all, n1, n0, config.policy);
      if (msg.method == Method::ipw) {
        out.weighted_logrank = weighted_logrank(acc, g1, g0, all, n1, n0, config.policy);
      }
    } catch (const DegenerateStatisticError& e) {
      out.warnings.push_back(std::string("log-rank test unavailable: ") + e.what());
    }
  }
  return out;
}

StudyResult run_unweighted(const std::vector<SiteDataset>& sites, FederationConfig config) {
  config.method = Method::unweighted;
  return run_study(sites, config);
}

StudyResult run_ipw(const std::vector<SiteDataset>& sites, FederationConfig config) {
  config.method = Method::ipw;
  return run_study(sites, config);
}

StudyResult run_study(const std::vector<SiteDataset>& sites, const FederationConfig& config,
                      const MessageObserver& observer) {
  if (sites.empty()) throw ValidationError("no sites");
  config.validate();
  std::vector<Site> holders;
  holders.reserve(sites.size());
  for (const auto& s : sites) holders.emplace_back(s, config);

  std::vector<std::size_t> sizes;
  const auto handoff = [&](const Site& site, PassId pass, const std::string& bytes) {
    sizes.push_back(bytes.size());
    if (observer) observer(site.id(), pass, bytes);
  };
  std::vector<SiteTraceEntry> propensity_trace;
  std::string broadcast;
  if (config.method == Method::ipw) {
    std::string bytes = holders.front().start_propensity();
    handoff(holders.front(), PassId::propensity, bytes);
    for (std::size_t k = 1; k < holders.size(); ++k) {
      bytes = holders[k].continue_propensity(bytes);
      handoff(holders[k], PassId::propensity, bytes);
    }
    broadcast = std::move(bytes);
    propensity_trace = deserialize_message(broadcast).site_trace;
  }
  std::string bytes = holders.front().start_curves(broadcast);
  handoff(holders.front(), PassId::curves, bytes);
  for (std::size_t k = 1; k < holders.size(); ++k) {
    bytes = holders[k].continue_curves(bytes);
    handoff(holders[k], PassId::curves, bytes);
  }
  StudyResult out = finalize(deserialize_message(bytes), config);
  out.propensity_trace = std::move(propensity_trace);
  out.message_sizes = std::move(sizes);
  return out;
}

}  // namespace dkm
