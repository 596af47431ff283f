#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dkm/inference.hpp"
#include "dkm/propensity.hpp"
#include "dkm/spline.hpp"

namespace dkm {

inline constexpr int kProtocolVersion = 1;
inline constexpr int kSplineSchemaVersion = 1;

enum class PassId { propensity, curves };
enum class Method { unweighted, ipw };

std::string to_string(PassId p);
std::string to_string(Method m);
Method method_from_string(const std::string& name);

struct SiteTraceEntry {
  std::string site_id;
  std::int64_t n = 0;
  /// ISO-8601 UTC, second resolution.
  std::string timestamp;
  friend bool operator==(const SiteTraceEntry&, const SiteTraceEntry&) = default;
};

struct MessageDiagnostics {
  std::int64_t updates = 0;
  std::int64_t non_monotone = 0;
  std::int64_t propensity_clamped = 0;
  std::int64_t knot_growths = 0;
  friend bool operator==(const MessageDiagnostics&, const MessageDiagnostics&) = default;
};

/// Everything one site hands to the next. Holds summary state only.
struct SiteMessage {
  int protocol_version = kProtocolVersion;
  PassId pass_id = PassId::curves;
  Method method = Method::unweighted;
  /// Indexed by Group; empty during the propensity pass.
  std::array<std::optional<SplineParams>, kGroupCount> group_params;
  InferenceAccumulators accumulators;
  std::optional<PropensityState> propensity;
  MessageDiagnostics diagnostics;
  std::vector<SiteTraceEntry> site_trace;

  const SplineParams& params(Group g) const;
  /// Throws ProtocolError naming the offending field.
  void validate() const;
  friend bool operator==(const SiteMessage&, const SiteMessage&) = default;
};

std::string serialize_message(const SiteMessage& msg);
SiteMessage deserialize_message(const std::string& bytes);

std::string serialize_spline_params(const SplineParams& params);
SplineParams deserialize_spline_params(const std::string& bytes);

/// One line per leaf field: "path: type[length]".
std::vector<std::string> message_inventory(const SiteMessage& msg);

/// Field names that would identify a record; none may appear in a message.
bool has_record_level_fields(const std::string& bytes);

std::string utc_timestamp();

}  // namespace dkm
