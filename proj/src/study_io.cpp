#include "dkm/study_io.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "dkm/csv_io.hpp"
#include "dkm/error.hpp"

namespace dkm {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TOML subset

class TomlReader {
 public:
  TomlReader(const std::string& text) : text_(text) {}

  json parse() {
    json out = json::object();
    while (true) {
      skip_blank_lines();
      if (at_end()) break;
      const std::size_t line = line_;
      const std::string key = read_key();
      skip_inline_space();
      expect('=');
      skip_inline_space();
      if (out.contains(key)) fail(line, "duplicate key '" + key + "'");
      out[key] = read_value();
      skip_inline_space();
      skip_comment();
      if (!at_end() && peek() != '\n') fail(line_, "unexpected text after value");
    }
    return out;
  }

 private:
  [[noreturn]] void fail(std::size_t line, const std::string& what) const {
    throw ValidationError("config line " + std::to_string(line) + ": " + what);
  }
  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }
  char get() {
    const char c = text_[pos_++];
    if (c == '\n') ++line_;
    return c;
  }
  void expect(char c) {
    if (at_end() || peek() != c) fail(line_, std::string("expected '") + c + "'");
    get();
  }
  void skip_inline_space() {
    while (!at_end() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) get();
  }
  void skip_comment() {
    if (!at_end() && peek() == '#') {
      while (!at_end() && peek() != '\n') get();
    }
  }
  void skip_blank_lines() {
    while (!at_end()) {
      skip_inline_space();
      skip_comment();
      if (!at_end() && peek() == '\n') {
        get();
        continue;
      }
      break;
    }
  }
  void skip_space_and_newlines() {
    while (!at_end()) {
      skip_inline_space();
      skip_comment();
      if (!at_end() && peek() == '\n') {
        get();
      } else {
        break;
      }
    }
  }
  std::string read_key() {
    if (peek() == '[') fail(line_, "tables are not supported; use top-level keys");
    std::string key;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) {
      key += get();
    }
    if (key.empty()) fail(line_, "expected a key");
    return key;
  }
  json read_value() {
    if (at_end()) fail(line_, "missing value");
    const char c = peek();
    if (c == '"') return read_string();
    if (c == '\'') return read_literal();
    if (c == '[') {
      get();
      json arr = json::array();
      skip_space_and_newlines();
      if (!at_end() && peek() == ']') {
        get();
        return arr;
      }
      while (true) {
        skip_space_and_newlines();
        arr.push_back(read_value());
        skip_space_and_newlines();
        if (at_end()) fail(line_, "unterminated array");
        if (peek() == ',') {
          get();
          skip_space_and_newlines();
          if (!at_end() && peek() == ']') {
            get();
            return arr;
          }
          continue;
        }
        expect(']');
        return arr;
      }
    }
    std::string token;
    while (!at_end() && peek() != ',' && peek() != ']' && peek() != '\n' && peek() != '#' &&
           peek() != ' ' && peek() != '\t' && peek() != '\r') {
      token += get();
    }
    if (token == "true") return true;
    if (token == "false") return false;
    std::string cleaned;
    for (char ch : token) {
      if (ch != '_') cleaned += ch;
    }
    if (cleaned.empty()) fail(line_, "missing value");
    const bool is_int = cleaned.find_first_of(".eE") == std::string::npos && cleaned != "inf" && cleaned != "nan";
    try {
      std::size_t used = 0;
      if (is_int) {
        const long long v = std::stoll(cleaned, &used);
        if (used == cleaned.size()) return v;
      } else {
        const double v = std::stod(cleaned, &used);
        if (used == cleaned.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail(line_, "cannot parse value '" + token + "'");
  }
  json read_string() {
    expect('"');
    std::string s;
    while (true) {
      if (at_end() || peek() == '\n') fail(line_, "unterminated string");
      const char c = get();
      if (c == '"') break;
      if (c == '\\') {
        if (at_end()) fail(line_, "unterminated string");
        const char e = get();
        switch (e) {
          case 'n': s += '\n'; break;
          case 't': s += '\t'; break;
          case '"': s += '"'; break;
          case '\\': s += '\\'; break;
          default: fail(line_, std::string("unsupported escape \\") + e);
        }
      } else {
        s += c;
      }
    }
    return s;
  }

  json read_literal() {
    expect('\'');
    std::string s;
    while (true) {
      if (at_end() || peek() == '\n') fail(line_, "unterminated string");
      const char c = get();
      if (c == '\'') break;
      s += c;
    }
    return s;
  }

  const std::string& text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

double as_real(const json& j, const std::string& key) {
  if (!j.is_number()) throw ProtocolError(key, "must be a number");
  return j.get<double>();
}

std::int64_t as_int(const json& j, const std::string& key) {
  if (!j.is_number_integer()) throw ProtocolError(key, "must be an integer");
  return j.get<std::int64_t>();
}

std::size_t as_count(const json& j, const std::string& key) {
  const auto v = as_int(j, key);
  if (v < 0) throw ProtocolError(key, "must be nonnegative");
  return static_cast<std::size_t>(v);
}

std::string as_string(const json& j, const std::string& key) {
  if (!j.is_string()) throw ProtocolError(key, "must be a string");
  return j.get<std::string>();
}

StudyConfig from_json(const json& j, const fs::path& base) {
  if (!j.is_object()) throw ProtocolError("<root>", "config must be a table of keys");
  StudyConfig c;
  bool has_batch_size = false, has_batch_fraction = false;
  for (const auto& [key, v] : j.items()) {
    if (key == "site_files") {
      if (!v.is_array()) throw ProtocolError(key, "must be an array of paths");
      for (std::size_t i = 0; i < v.size(); ++i) {
        fs::path p = as_string(v[i], key + "[" + std::to_string(i) + "]");
        c.site_files.push_back(p.is_absolute() ? p : base / p);
      }
    } else if (key == "order") {
      if (!v.is_array()) throw ProtocolError(key, "must be an array of site indices");
      for (std::size_t i = 0; i < v.size(); ++i) c.order.push_back(as_count(v[i], key + "[" + std::to_string(i) + "]"));
    } else if (key == "mode") {
      c.federation.method = method_from_string(as_string(v, key));
    } else if (key == "knots") {
      c.federation.knots = as_count(v, key);
    } else if (key == "knot_growth_every") {
      c.federation.knot_growth_every = as_count(v, key);
    } else if (key == "degree") {
      c.federation.degree = static_cast<int>(as_int(v, key));
    } else if (key == "link") {
      c.federation.link = link_from_string(as_string(v, key));
    } else if (key == "t_max") {
      c.federation.t_max = as_real(v, key);
    } else if (key == "batch_size") {
      c.federation.batch_size = as_count(v, key);
      has_batch_size = true;
    } else if (key == "batch_fraction") {
      c.federation.batch_fraction = as_real(v, key);
      has_batch_fraction = true;
    } else if (key == "restriction") {
      c.federation.policy.restriction = as_real(v, key);
    } else if (key == "confint_restriction") {
      c.federation.confint_policy.restriction = as_real(v, key);
    } else if (key == "eval_times") {
      if (!v.is_array()) throw ProtocolError(key, "must be an array of times");
      c.federation.eval_times.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        c.federation.eval_times.push_back(as_real(v[i], key + "[" + std::to_string(i) + "]"));
      }
    } else if (key == "out_dir") {
      fs::path p = as_string(v, key);
      c.out_dir = p.is_absolute() ? p : base / p;
    } else if (key == "seed") {
      c.seed = static_cast<std::uint64_t>(as_int(v, key));
    } else {
      throw ProtocolError(key, "unknown config key");
    }
  }
  if (has_batch_size && has_batch_fraction) {
    throw ProtocolError("batch_fraction", "set either batch_size or batch_fraction, not both");
  }
  return c;
}

void write_interval(json& j, const ConfidenceInterval& ci) {
  j = {{"time", ci.time},         {"estimate", ci.estimate}, {"lower", ci.lower},
       {"upper", ci.upper},       {"variance", ci.variance}, {"degenerate", ci.degenerate}};
}

json spline_json(const SplineParams& p) { return json::parse(serialize_spline_params(p)); }

json trace_json(const std::vector<SiteTraceEntry>& trace) {
  json arr = json::array();
  for (const auto& e : trace) arr.push_back({{"site_id", e.site_id}, {"n", e.n}, {"timestamp", e.timestamp}});
  return arr;
}

template <std::size_t N>
json array_json(const std::array<double, N>& a) {
  return json(std::vector<double>(a.begin(), a.end()));
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void StudyConfig::validate() const {
  if (site_files.empty()) throw ProtocolError("site_files", "at least one site file is required");
  if (!order.empty()) {
    if (order.size() != site_files.size()) throw ProtocolError("order", "must list every site exactly once");
    std::vector<bool> seen(site_files.size(), false);
    for (std::size_t i : order) {
      if (i >= site_files.size() || seen[i]) throw ProtocolError("order", "must be a permutation of site indices");
      seen[i] = true;
    }
  }
  federation.validate();
}

StudyConfig parse_study_config(const std::string& text, const fs::path& base_dir) {
  std::size_t first = text.find_first_not_of(" \t\r\n");
  json j;
  if (first != std::string::npos && text[first] == '{') {
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ValidationError(std::string("config: malformed JSON: ") + e.what());
    }
  } else {
    j = TomlReader(text).parse();
  }
  StudyConfig c = from_json(j, base_dir);
  c.validate();
  return c;
}

StudyConfig load_study_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_study_config(ss.str(), path.parent_path());
}

std::vector<SiteDataset> load_sites(const StudyConfig& config) {
  std::vector<SiteDataset> sites;
  for (const auto& p : config.site_files) {
    if (!fs::exists(p)) throw ValidationError("site file not found: " + p.string());
    auto table = read_records_csv_file(p.string());
    if (config.federation.method == Method::ipw) {
      if (!table.has_arm) throw ValidationError(p.string() + ": ipw mode requires an arm column");
      if (table.covariate_names.empty()) throw ValidationError(p.string() + ": ipw mode requires covariate columns");
    }
    sites.push_back({p.stem().string(), std::move(table.records)});
  }
  if (!config.order.empty()) {
    std::vector<SiteDataset> ordered;
    for (std::size_t i : config.order) ordered.push_back(sites[i]);
    sites = std::move(ordered);
  }
  return sites;
}

void write_result_json(std::ostream& out, const StudyResult& r) {
  json j;
  j["method"] = to_string(r.method);
  j["eval_times"] = r.eval_times;
  json groups = json::object();
  for (const auto& g : r.groups) {
    if (!g) continue;
    json gj;
    gj["curve"] = spline_json(g->params);
    json cis = json::array();
    for (const auto& ci : g->intervals) {
      json c;
      write_interval(c, ci);
      cis.push_back(c);
    }
    gj["intervals"] = cis;
    gj["influence_variance"] = g->influence_variance;
    groups[to_string(g->group)] = gj;
  }
  j["groups"] = groups;
  if (r.logrank) {
    j["logrank"] = {{"statistic", r.logrank->statistic},
                    {"p_value", r.logrank->p_value},
                    {"observed", r.logrank->observed},
                    {"expected", r.logrank->expected},
                    {"horizon", r.logrank->horizon}};
  }
  if (r.weighted_logrank) {
    j["weighted_logrank"] = {{"statistic", r.weighted_logrank->statistic},
                             {"variance", r.weighted_logrank->variance},
                             {"z", r.weighted_logrank->z},
                             {"p_value", r.weighted_logrank->p_value}};
  }
  if (r.propensity) {
    j["propensity"] = {{"coef", r.propensity->coef}, {"n_cum", r.propensity->n_cum}};
  }
  j["diagnostics"] = {{"updates", r.diagnostics.updates},
                      {"non_monotone", r.diagnostics.non_monotone},
                      {"propensity_clamped", r.diagnostics.propensity_clamped},
                      {"knot_growths", r.diagnostics.knot_growths}};
  j["propensity_trace"] = trace_json(r.propensity_trace);
  j["curve_trace"] = trace_json(r.curve_trace);
  j["warnings"] = r.warnings;
  out << j.dump(2) << '\n';
}

void write_curves_csv(std::ostream& out, const StudyResult& r) {
  out << "group,time,estimate,lower,upper\n";
  for (Group g : kAllGroups) {
    const auto& gr = r.groups[index(g)];
    if (!gr) continue;
    std::vector<ConfidenceInterval> rows = gr->intervals;
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
    for (const auto& ci : rows) {
      out << to_string(g) << ',' << fmt(ci.time) << ',' << fmt(ci.estimate) << ',' << fmt(ci.lower) << ','
          << fmt(ci.upper) << '\n';
    }
  }
}

void write_logrank_summary(std::ostream& out, const StudyResult& r) {
  out << "method: " << to_string(r.method) << '\n';
  if (r.logrank) {
    out << "logrank_chisq: " << fmt(r.logrank->statistic) << '\n'
        << "logrank_p_value: " << fmt(r.logrank->p_value) << '\n'
        << "observed_arm1: " << fmt(r.logrank->observed[0]) << '\n'
        << "expected_arm1: " << fmt(r.logrank->expected[0]) << '\n'
        << "observed_arm0: " << fmt(r.logrank->observed[1]) << '\n'
        << "expected_arm0: " << fmt(r.logrank->expected[1]) << '\n';
  } else {
    out << "logrank: unavailable\n";
  }
  if (r.weighted_logrank) {
    out << "weighted_L: " << fmt(r.weighted_logrank->statistic) << '\n'
        << "weighted_variance: " << fmt(r.weighted_logrank->variance) << '\n'
        << "weighted_z: " << fmt(r.weighted_logrank->z) << '\n'
        << "weighted_p_value: " << fmt(r.weighted_logrank->p_value) << '\n';
  }
  for (const auto& w : r.warnings) out << "warning: " << w << '\n';
}

void write_metrics_json(std::ostream& out, const SimMetrics& m) {
  json j;
  j["scenario"] = to_string(m.scenario);
  j["hazard_ratio"] = m.hazard_ratio;
  j["method"] = to_string(m.method);
  j["repeats"] = m.repeats;
  j["failures"] = m.failures;
  j["seed"] = m.seed;
  j["calibration"] = {{"censoring_rate", m.calibration.censoring_rate},
                      {"realized_censoring", m.calibration.realized_censoring},
                      {"quantile_levels", array_json(kQuantileLevels)},
                      {"quantile_times", array_json(m.calibration.quantile_times)},
                      {"truth", array_json(m.calibration.truth)},
                      {"t_max", m.calibration.t_max}};
  j["mean_abs_deviation"] = array_json(m.mean_abs_deviation);
  j["bias_distributed"] = array_json(m.bias_distributed);
  j["bias_pooled"] = array_json(m.bias_pooled);
  j["coverage_distributed"] = array_json(m.coverage_distributed);
  j["coverage_pooled"] = array_json(m.coverage_pooled);
  j["sup_norm"] = {{"mean", m.sup_norm_mean}, {"p90", m.sup_norm_p90}, {"fraction_below_0.03", m.fraction_sup_below_003}};
  j["rejection"] = {{"distributed", m.rejection_distributed},
                    {"pooled", m.rejection_pooled},
                    {"weighted", m.rejection_weighted},
                    {"pooled_weighted", m.rejection_pooled_weighted}};
  out << j.dump(2) << '\n';
}

void write_repeats_csv(std::ostream& out, const SimMetrics& m) {
  out << "repeat,ok,q,time,distributed,pooled,covered_distributed,covered_pooled,sup_norm,p_distributed,"
         "p_pooled,p_weighted,p_pooled_weighted\n";
  for (const auto& r : m.per_repeat) {
    for (std::size_t q = 0; q < 4; ++q) {
      out << r.repeat << ',' << (r.ok ? 1 : 0) << ',' << kQuantileLevels[q] << ','
          << fmt(m.calibration.quantile_times[q]) << ',' << fmt(r.distributed[q]) << ',' << fmt(r.pooled[q]) << ','
          << (r.covered_distributed[q] ? 1 : 0) << ',' << (r.covered_pooled[q] ? 1 : 0) << ','
          << fmt(r.sup_norm) << ',' << fmt(r.p_distributed) << ',' << fmt(r.p_pooled) << ','
          << fmt(r.p_weighted) << ',' << fmt(r.p_pooled_weighted) << '\n';
    }
  }
}

}  // namespace dkm
