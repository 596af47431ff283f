#include <gtest/gtest.h>

#include <json.hpp>

#include "dkm/error.hpp"
#include "dkm/federation.hpp"
#include "dkm/message.hpp"
#include "support.hpp"

using namespace dkm;
using nlohmann::json;

namespace {

std::vector<std::string> handoffs(const std::vector<SiteDataset>& sites, FederationConfig cfg) {
  std::vector<std::string> out;
  run_study(sites, cfg, [&](const std::string&, PassId, const std::string& b) { out.push_back(b); });
  return out;
}

FederationConfig small_config(Method m = Method::unweighted) {
  FederationConfig cfg;
  cfg.method = m;
  cfg.t_max = 12.0;
  cfg.eval_times = {2.0, 5.0};
  return cfg;
}

std::vector<SiteDataset> ipw_sites(std::size_t n2, std::uint64_t seed) {
  auto r = test::exponential_data(200 + n2, 8.0, 0.05, seed, true);
  test::add_confounded_arms(r, seed + 1);
  return test::split_sites(r, {200, n2});
}

std::string expect_protocol_error(const std::string& bytes) {
  try {
    deserialize_message(bytes);
  } catch (const ProtocolError& e) {
    return e.field_path();
  }
  ADD_FAILURE() << "message was accepted";
  return {};
}

}  // namespace

TEST(Message, RoundTripIsStructurallyEqual) {
  for (Method m : {Method::unweighted, Method::ipw}) {
    for (const auto& bytes : handoffs(ipw_sites(50, 3), small_config(m))) {
      const auto msg = deserialize_message(bytes);
      EXPECT_EQ(deserialize_message(serialize_message(msg)), msg);
      EXPECT_EQ(serialize_message(msg), bytes);
    }
  }
}

TEST(Message, RejectsNonFiniteCoefficient) {
  const auto bytes = handoffs(ipw_sites(50, 3), small_config()).back();
  auto msg = deserialize_message(bytes);
  (*msg.group_params[index(Group::overall)]).beta_surv[1] = NAN;
  EXPECT_EQ(expect_protocol_error(serialize_message(msg)), "group_params.overall.beta_surv[1]");
}

TEST(Message, TamperedKnotsNameTheField) {
  const auto bytes = handoffs(ipw_sites(50, 3), small_config()).back();
  json j = json::parse(bytes);
  auto& knots = j["group_params"]["overall"]["knots"];
  std::swap(knots[0], knots[1]);
  EXPECT_EQ(expect_protocol_error(j.dump()), "group_params.overall.knots");
}

TEST(Message, SchemaViolations) {
  const auto bytes = handoffs(ipw_sites(50, 3), small_config(Method::ipw)).back();
  const json base = json::parse(bytes);
  {
    json j = base;
    j["protocol_version"] = 2;
    EXPECT_EQ(expect_protocol_error(j.dump()), "protocol_version");
  }
  {
    json j = base;
    j["group_params"]["arm1"]["times"] = json::array({1.0, 2.0});
    EXPECT_EQ(expect_protocol_error(j.dump()), "group_params.arm1.times");
  }
  {
    json j = base;
    j["accumulators"]["sum_w2_psi2_surv"]["arm0"].push_back(1.0);
    EXPECT_EQ(expect_protocol_error(j.dump()), "accumulators.sum_w2_psi2_surv.arm0");
  }
  {
    json j = base;
    j["propensity"] = nullptr;
    EXPECT_EQ(expect_protocol_error(j.dump()), "propensity");
  }
  {
    json j = base;
    j["group_params"].erase("arm0");
    EXPECT_EQ(expect_protocol_error(j.dump()), "group_params");
  }
  {
    json j = base;
    j["pass_id"] = "final";
    EXPECT_EQ(expect_protocol_error(j.dump()), "pass_id");
  }
  EXPECT_THROW(deserialize_message("{not json"), ProtocolError);
}

TEST(Message, SizeIndependentOfSiteRecordCount) {
  // Knot growth is off so both federations share the same basis.
  auto cfg = small_config(Method::ipw);
  cfg.knot_growth_every = 0;
  const auto small = handoffs(ipw_sites(10, 5), cfg);
  const auto large = handoffs(ipw_sites(10000, 5), cfg);
  ASSERT_EQ(small.size(), large.size());
  for (std::size_t i = 0; i < small.size(); ++i) {
    EXPECT_EQ(small[i].size(), large[i].size()) << "handoff " << i;
    EXPECT_FALSE(has_record_level_fields(small[i]));
    EXPECT_EQ(message_inventory(deserialize_message(small[i])), message_inventory(deserialize_message(large[i])));
  }
}

TEST(Message, MessagesCarryNoRecordValues) {
  const auto sites = ipw_sites(30, 9);
  const auto bytes = handoffs(sites, small_config(Method::ipw)).back();
  // spot check: no follow-up time of the last site appears verbatim
  for (const auto& r : sites[1].records) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.16e", r.time);
    EXPECT_EQ(bytes.find(buf), std::string::npos);
  }
  EXPECT_TRUE(has_record_level_fields(R"({"a": {"times": [1, 2]}})"));
  EXPECT_FALSE(has_record_level_fields(R"({"a": {"knots": [1, 2]}})"));
}

TEST(Message, SiteTraceCoversEverySiteOnce) {
  const auto sites = ipw_sites(60, 4);
  const auto res = run_study(sites, small_config(Method::ipw));
  ASSERT_EQ(res.propensity_trace.size(), 2u);
  ASSERT_EQ(res.curve_trace.size(), 2u);
  EXPECT_EQ(res.curve_trace[0].site_id, "s1");
  EXPECT_EQ(res.curve_trace[1].site_id, "s2");
  EXPECT_EQ(res.curve_trace[1].n, 60);
  EXPECT_EQ(res.curve_trace[0].timestamp.size(), utc_timestamp().size());
}
