#include "dkm/message.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <set>

#include <json.hpp>

#include "dkm/error.hpp"

namespace dkm {

namespace {

using nlohmann::json;

// Numbers are written at a fixed width so a message's byte size depends on
// its shape only, never on the values it carries.
constexpr int kRealWidth = 24;
constexpr int kIntWidth = 20;

class Writer {
 public:
  void begin_object() { open('{'); }
  void end_object() { close('}'); }
  void begin_array() { open('['); }
  void end_array() { close(']'); }

  void key(const std::string& name) {
    separate();
    out_ += json(name).dump();
    out_ += ": ";
    pending_key_ = true;
  }

  void real(double v) {
    separate();
    char buf[64];
    if (std::isfinite(v)) {
      std::snprintf(buf, sizeof buf, "%*.16e", kRealWidth, v);
    } else {
      std::snprintf(buf, sizeof buf, "%*s", kRealWidth, "null");
    }
    out_ += buf;
  }

  void integer(std::int64_t v) {
    separate();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%*lld", kIntWidth, static_cast<long long>(v));
    out_ += buf;
  }

  void string(const std::string& s) {
    separate();
    out_ += json(s).dump();
  }

  void null() {
    separate();
    out_ += "null";
  }

  void reals(const std::vector<double>& v) {
    begin_array();
    for (double x : v) real(x);
    end_array();
  }

  std::string finish() {
    out_ += '\n';
    return std::move(out_);
  }

 private:
  void open(char c) {
    separate();
    out_ += c;
    first_.push_back(true);
  }
  void close(char c) {
    const bool empty = first_.back();
    first_.pop_back();
    if (!empty) newline();
    out_ += c;
  }
  void separate() {
    if (pending_key_) {
      pending_key_ = false;
      return;
    }
    if (first_.empty()) return;
    if (!first_.back()) out_ += ',';
    first_.back() = false;
    newline();
  }
  void newline() {
    out_ += '\n';
    out_.append(2 * first_.size(), ' ');
  }

  std::string out_;
  std::vector<bool> first_;
  bool pending_key_ = false;
};

void write_spline(Writer& w, const SplineParams& p) {
  w.begin_object();
  w.key("version");
  w.integer(kSplineSchemaVersion);
  w.key("link");
  w.string(to_string(p.link));
  w.key("degree");
  w.integer(p.degree);
  w.key("t_max");
  w.real(p.t_max);
  w.key("knots");
  w.reals(p.knots);
  w.key("beta_surv");
  w.reals(p.beta_surv);
  w.key("beta_atrisk");
  w.reals(p.beta_atrisk);
  w.key("n_cum");
  w.integer(p.n_cum);
  w.end_object();
}

void write_accumulators(Writer& w, const InferenceAccumulators& a) {
  w.begin_object();
  w.key("eval_times");
  w.reals(a.eval_times);
  const auto per_group = [&](const char* name, auto&& emit) {
    w.key(name);
    w.begin_object();
    for (Group g : kAllGroups) {
      w.key(to_string(g));
      emit(index(g));
    }
    w.end_object();
  };
  per_group("sum_w2_psi2_surv", [&](std::size_t g) { w.reals(a.sum_w2_psi2_surv[g]); });
  per_group("sum_w", [&](std::size_t g) { w.real(a.sum_w[g]); });
  per_group("sum_w2", [&](std::size_t g) { w.real(a.sum_w2[g]); });
  per_group("count", [&](std::size_t g) { w.integer(a.count[g]); });
  w.key("sum_w2_psi2_logrank");
  w.real(a.sum_w2_psi2_logrank);
  w.key("n_treated");
  w.integer(a.n_treated);
  w.key("n_total");
  w.integer(a.n_total);
  w.end_object();
}

void write_propensity(Writer& w, const PropensityState& p) {
  w.begin_object();
  w.key("coef");
  w.reals(p.coef);
  w.key("cum_info");
  w.reals(p.cum_info);
  w.key("n_cum");
  w.integer(p.n_cum);
  w.end_object();
}

// ---------------------------------------------------------------------------
// Reading

std::string child(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

const json& field(const json& obj, const std::string& path, const std::string& key) {
  if (!obj.is_object()) throw ProtocolError(path.empty() ? "<root>" : path, "expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw ProtocolError(child(path, key), "missing field");
  return *it;
}

void only_keys(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ProtocolError(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& [k, v] : obj.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* name) { return k == name; })) {
      throw ProtocolError(child(path, k), "unknown field");
    }
  }
}

double read_real(const json& j, const std::string& path) {
  if (!j.is_number()) throw ProtocolError(path, "must be a finite number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ProtocolError(path, "must be a finite number");
  return v;
}

std::int64_t read_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ProtocolError(path, "must be an integer");
  return j.get<std::int64_t>();
}

std::string read_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw ProtocolError(path, "must be a string");
  return j.get<std::string>();
}

std::vector<double> read_reals(const json& j, const std::string& path) {
  if (!j.is_array()) throw ProtocolError(path, "must be an array of numbers");
  std::vector<double> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(read_real(j[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

SplineParams read_spline(const json& j, const std::string& path) {
  only_keys(j, path, {"version", "link", "degree", "t_max", "knots", "beta_surv", "beta_atrisk", "n_cum"});
  if (read_int(field(j, path, "version"), child(path, "version")) != kSplineSchemaVersion) {
    throw ProtocolError(child(path, "version"), "unsupported curve schema version");
  }
  SplineParams p;
  try {
    p.link = link_from_string(read_string(field(j, path, "link"), child(path, "link")));
  } catch (const ProtocolError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ProtocolError(child(path, "link"), e.what());
  }
  p.degree = static_cast<int>(read_int(field(j, path, "degree"), child(path, "degree")));
  p.t_max = read_real(field(j, path, "t_max"), child(path, "t_max"));
  p.knots = read_reals(field(j, path, "knots"), child(path, "knots"));
  p.beta_surv = read_reals(field(j, path, "beta_surv"), child(path, "beta_surv"));
  p.beta_atrisk = read_reals(field(j, path, "beta_atrisk"), child(path, "beta_atrisk"));
  p.n_cum = read_int(field(j, path, "n_cum"), child(path, "n_cum"));
  p.validate(path);
  return p;
}

InferenceAccumulators read_accumulators(const json& j, const std::string& path) {
  only_keys(j, path, {"eval_times", "sum_w2_psi2_surv", "sum_w", "sum_w2", "count",
                      "sum_w2_psi2_logrank", "n_treated", "n_total"});
  InferenceAccumulators a;
  a.eval_times = read_reals(field(j, path, "eval_times"), child(path, "eval_times"));
  const auto per_group = [&](const char* name, auto&& read) {
    const std::string p = child(path, name);
    const json& obj = field(j, path, name);
    only_keys(obj, p, {"arm0", "arm1", "overall"});
    for (Group g : kAllGroups) {
      const std::string gp = child(p, to_string(g));
      read(index(g), field(obj, p, to_string(g)), gp);
    }
  };
  per_group("sum_w2_psi2_surv", [&](std::size_t g, const json& v, const std::string& p) {
    a.sum_w2_psi2_surv[g] = read_reals(v, p);
  });
  per_group("sum_w", [&](std::size_t g, const json& v, const std::string& p) { a.sum_w[g] = read_real(v, p); });
  per_group("sum_w2", [&](std::size_t g, const json& v, const std::string& p) { a.sum_w2[g] = read_real(v, p); });
  per_group("count", [&](std::size_t g, const json& v, const std::string& p) { a.count[g] = read_int(v, p); });
  a.sum_w2_psi2_logrank =
      read_real(field(j, path, "sum_w2_psi2_logrank"), child(path, "sum_w2_psi2_logrank"));
  a.n_treated = read_int(field(j, path, "n_treated"), child(path, "n_treated"));
  a.n_total = read_int(field(j, path, "n_total"), child(path, "n_total"));
  a.validate(path);
  return a;
}

PropensityState read_propensity(const json& j, const std::string& path) {
  only_keys(j, path, {"coef", "cum_info", "n_cum"});
  PropensityState p;
  p.coef = read_reals(field(j, path, "coef"), child(path, "coef"));
  p.cum_info = read_reals(field(j, path, "cum_info"), child(path, "cum_info"));
  p.n_cum = read_int(field(j, path, "n_cum"), child(path, "n_cum"));
  p.validate(path);
  return p;
}

json parse(const std::string& bytes) {
  try {
    return json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw ProtocolError("<root>", std::string("malformed JSON: ") + e.what());
  }
}

void inventory_walk(const json& j, const std::string& path, std::vector<std::string>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) inventory_walk(v, child(path, k), out);
  } else if (j.is_array()) {
    bool scalar = std::all_of(j.begin(), j.end(), [](const json& e) { return !e.is_structured(); });
    if (scalar) {
      out.push_back(path + ": number[" + std::to_string(j.size()) + "]");
    } else {
      for (std::size_t i = 0; i < j.size(); ++i) {
        inventory_walk(j[i], path + "[" + std::to_string(i) + "]", out);
      }
    }
  } else {
    out.push_back(path + ": " + std::string(j.type_name()));
  }
}

}  // namespace

std::string to_string(PassId p) { return p == PassId::propensity ? "propensity" : "curves"; }
std::string to_string(Method m) { return m == Method::ipw ? "ipw" : "unweighted"; }

Method method_from_string(const std::string& name) {
  if (name == "unweighted") return Method::unweighted;
  if (name == "ipw") return Method::ipw;
  throw ValidationError("unknown mode '" + name + "' (expected unweighted or ipw)");
}

const SplineParams& SiteMessage::params(Group g) const {
  const auto& p = group_params[index(g)];
  if (!p) throw ProtocolError("group_params." + to_string(g), "missing curve");
  return *p;
}

void SiteMessage::validate() const {
  if (protocol_version != kProtocolVersion) {
    throw ProtocolError("protocol_version", "unsupported version " + std::to_string(protocol_version));
  }
  if (pass_id == PassId::curves && !group_params[index(Group::overall)]) {
    throw ProtocolError("group_params.overall", "missing curve");
  }
  if (group_params[index(Group::arm0)].has_value() != group_params[index(Group::arm1)].has_value()) {
    throw ProtocolError("group_params", "arm curves must be present together");
  }
  const SplineParams* first = nullptr;
  for (Group g : kAllGroups) {
    const auto& p = group_params[index(g)];
    if (!p) continue;
    p->validate("group_params." + to_string(g));
    if (first && (p->t_max != first->t_max || p->knots != first->knots || p->degree != first->degree)) {
      throw ProtocolError("group_params." + to_string(g), "groups must share knots, degree and t_max");
    }
    first = &*p;
  }
  accumulators.validate("accumulators");
  if (propensity) propensity->validate("propensity");
  if (method == Method::ipw && !propensity) throw ProtocolError("propensity", "required in ipw mode");
  for (std::size_t i = 0; i < site_trace.size(); ++i) {
    const std::string p = "site_trace[" + std::to_string(i) + "]";
    if (site_trace[i].site_id.empty()) throw ProtocolError(p + ".site_id", "must not be empty");
    if (site_trace[i].n < 0) throw ProtocolError(p + ".n", "must be >= 0");
    for (std::size_t k = 0; k < i; ++k) {
      if (site_trace[k].site_id == site_trace[i].site_id) {
        throw ProtocolError(p + ".site_id", "site visited twice in one pass");
      }
    }
  }
}

std::string serialize_message(const SiteMessage& msg) {
  Writer w;
  w.begin_object();
  w.key("protocol_version");
  w.integer(msg.protocol_version);
  w.key("pass_id");
  w.string(to_string(msg.pass_id));
  w.key("method");
  w.string(to_string(msg.method));
  w.key("group_params");
  w.begin_object();
  for (Group g : kAllGroups) {
    const auto& p = msg.group_params[index(g)];
    if (!p) continue;
    w.key(to_string(g));
    write_spline(w, *p);
  }
  w.end_object();
  w.key("accumulators");
  write_accumulators(w, msg.accumulators);
  w.key("propensity");
  if (msg.propensity) {
    write_propensity(w, *msg.propensity);
  } else {
    w.null();
  }
  w.key("diagnostics");
  w.begin_object();
  w.key("updates");
  w.integer(msg.diagnostics.updates);
  w.key("non_monotone");
  w.integer(msg.diagnostics.non_monotone);
  w.key("propensity_clamped");
  w.integer(msg.diagnostics.propensity_clamped);
  w.key("knot_growths");
  w.integer(msg.diagnostics.knot_growths);
  w.end_object();
  w.key("site_trace");
  w.begin_array();
  for (const auto& e : msg.site_trace) {
    w.begin_object();
    w.key("site_id");
    w.string(e.site_id);
    w.key("n");
    w.integer(e.n);
    w.key("timestamp");
    w.string(e.timestamp);
    w.end_object();
  }
  w.end_array();
  w.end_object();
  return w.finish();
}

SiteMessage deserialize_message(const std::string& bytes) {
  const json j = parse(bytes);
  only_keys(j, "", {"protocol_version", "pass_id", "method", "group_params", "accumulators",
                    "propensity", "diagnostics", "site_trace"});
  SiteMessage m;
  m.protocol_version = static_cast<int>(read_int(field(j, "", "protocol_version"), "protocol_version"));
  if (m.protocol_version != kProtocolVersion) {
    throw ProtocolError("protocol_version", "unsupported version " + std::to_string(m.protocol_version));
  }
  const std::string pass = read_string(field(j, "", "pass_id"), "pass_id");
  if (pass == "propensity") {
    m.pass_id = PassId::propensity;
  } else if (pass == "curves") {
    m.pass_id = PassId::curves;
  } else {
    throw ProtocolError("pass_id", "unknown pass '" + pass + "'");
  }
  try {
    m.method = method_from_string(read_string(field(j, "", "method"), "method"));
  } catch (const ProtocolError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ProtocolError("method", e.what());
  }
  const json& gp = field(j, "", "group_params");
  only_keys(gp, "group_params", {"arm0", "arm1", "overall"});
  for (Group g : kAllGroups) {
    const auto it = gp.find(to_string(g));
    if (it != gp.end()) m.group_params[index(g)] = read_spline(*it, "group_params." + to_string(g));
  }
  m.accumulators = read_accumulators(field(j, "", "accumulators"), "accumulators");
  const json& pr = field(j, "", "propensity");
  if (!pr.is_null()) m.propensity = read_propensity(pr, "propensity");

  const json& d = field(j, "", "diagnostics");
  only_keys(d, "diagnostics", {"updates", "non_monotone", "propensity_clamped", "knot_growths"});
  m.diagnostics.updates = read_int(field(d, "diagnostics", "updates"), "diagnostics.updates");
  m.diagnostics.non_monotone = read_int(field(d, "diagnostics", "non_monotone"), "diagnostics.non_monotone");
  m.diagnostics.propensity_clamped =
      read_int(field(d, "diagnostics", "propensity_clamped"), "diagnostics.propensity_clamped");
  m.diagnostics.knot_growths = read_int(field(d, "diagnostics", "knot_growths"), "diagnostics.knot_growths");

  const json& tr = field(j, "", "site_trace");
  if (!tr.is_array()) throw ProtocolError("site_trace", "must be an array");
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const std::string p = "site_trace[" + std::to_string(i) + "]";
    only_keys(tr[i], p, {"site_id", "n", "timestamp"});
    SiteTraceEntry e;
    e.site_id = read_string(field(tr[i], p, "site_id"), p + ".site_id");
    e.n = read_int(field(tr[i], p, "n"), p + ".n");
    e.timestamp = read_string(field(tr[i], p, "timestamp"), p + ".timestamp");
    m.site_trace.push_back(std::move(e));
  }
  m.validate();
  return m;
}

std::string serialize_spline_params(const SplineParams& params) {
  params.validate();
  Writer w;
  write_spline(w, params);
  return w.finish();
}

SplineParams deserialize_spline_params(const std::string& bytes) {
  return read_spline(parse(bytes), "");
}

std::vector<std::string> message_inventory(const SiteMessage& msg) {
  std::vector<std::string> out;
  inventory_walk(json::parse(serialize_message(msg)), "", out);
  return out;
}

bool has_record_level_fields(const std::string& bytes) {
  static const std::set<std::string> forbidden{"time", "times", "event", "events", "arm",
                                               "covariates", "weight", "weights", "record",
                                               "records", "id", "ids", "subject"};
  bool found = false;
  const std::function<void(const json&)> walk = [&](const json& j) {
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) {
        if (forbidden.count(k)) found = true;
        walk(v);
      }
    } else if (j.is_array()) {
      for (const auto& e : j) walk(e);
    }
  };
  walk(parse(bytes));
  return found;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace dkm
