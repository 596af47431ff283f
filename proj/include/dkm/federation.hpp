#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dkm/inference.hpp"
#include "dkm/message.hpp"
#include "dkm/quadrature.hpp"
#include "dkm/spline.hpp"
#include "dkm/surv_core.hpp"

namespace dkm {

struct SiteDataset {
  std::string site_id;
  std::vector<SurvivalRecord> records;
};

struct FederationConfig {
  Method method = Method::unweighted;
  /// Final knot count. The first site starts from min(knots, 9) when it has
  /// at most 1000 records and gains one knot per `knot_growth_every`
  /// further observations (0 disables growth).
  std::size_t knots = 9;
  std::size_t knot_growth_every = 150;
  int degree = 3;
  Link link = Link::logit;
  /// Curve domain; defaults to the 90th percentile of first-site follow-up.
  std::optional<double> t_max;
  std::size_t batch_size = 8;
  /// When set, batches hold this fraction of the observations absorbed so far.
  std::optional<double> batch_fraction;
  IntegrationPolicy policy;
  IntegrationPolicy confint_policy;
  std::vector<double> eval_times;
  /// IPW pass with every weight replaced by 1.
  bool force_unit_weights = false;
  std::size_t min_first_site_records = 50;
  std::size_t min_first_site_events = 10;

  void validate() const;
};

struct GroupResult {
  Group group = Group::overall;
  SplineParams params;
  std::vector<ConfidenceInterval> intervals;
  /// sum w^2 psi^2 / (sum w)^2 at the eval times.
  std::vector<double> influence_variance;
};

struct StudyResult {
  Method method = Method::unweighted;
  std::vector<double> eval_times;
  std::array<std::optional<GroupResult>, kGroupCount> groups;
  std::optional<DistributedLogRank> logrank;
  std::optional<WeightedLogRank> weighted_logrank;
  std::optional<PropensityState> propensity;
  InferenceAccumulators accumulators;
  MessageDiagnostics diagnostics;
  std::vector<SiteTraceEntry> propensity_trace;
  std::vector<SiteTraceEntry> curve_trace;
  std::vector<std::string> warnings;
  /// Size in bytes of every message handed between sites, in order.
  std::vector<std::size_t> message_sizes;

  const GroupResult& group(Group g) const;
};

/// One data holder. Records never leave the object; it reads and writes
/// serialized messages only.
class Site {
 public:
  Site(SiteDataset data, FederationConfig config);

  const std::string& id() const { return data_.site_id; }
  std::size_t size() const { return data_.records.size(); }

  std::string start_propensity() const;
  std::string continue_propensity(const std::string& incoming) const;

  /// `broadcast` is the finished propensity message in ipw mode, empty
  /// otherwise.
  std::string start_curves(const std::string& broadcast) const;
  std::string continue_curves(const std::string& incoming) const;

 private:
  std::vector<double> weights(const SiteMessage& msg, std::int64_t* clamped) const;

  SiteDataset data_;
  FederationConfig config_;
};

/// Sees every message as it leaves a site.
using MessageObserver = std::function<void(const std::string& site_id, PassId pass, const std::string& bytes)>;

StudyResult run_unweighted(const std::vector<SiteDataset>& sites, FederationConfig config);
StudyResult run_ipw(const std::vector<SiteDataset>& sites, FederationConfig config);
StudyResult run_study(const std::vector<SiteDataset>& sites, const FederationConfig& config,
                      const MessageObserver& observer = {});

/// Turns the final curves message into intervals and tests.
StudyResult finalize(const SiteMessage& msg, const FederationConfig& config);

/// Knot count used by the first site.
std::size_t initial_knot_count(const FederationConfig& config, std::size_t first_site_records);

}  // namespace dkm
