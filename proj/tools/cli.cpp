#include "cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dkm/error.hpp"
#include "dkm/federation.hpp"
#include "dkm/message.hpp"
#include "dkm/simgen.hpp"
#include "dkm/study_io.hpp"

namespace dkm::cli {

namespace {

namespace fs = std::filesystem;

struct Overrides {
  std::optional<double> restriction;
  std::optional<double> confint_restriction;
  std::optional<std::size_t> batch_size;
  std::optional<double> batch_fraction;
  std::optional<std::size_t> knots;
  std::optional<int> degree;
  std::optional<std::string> link;
  std::optional<std::string> eval_times;
  std::optional<std::uint64_t> seed;
  std::optional<double> t_max;

  void add_to(CLI::App& app) {
    app.add_option("--restriction", restriction, "Gauss-Kronrod below this time, Romberg above");
    app.add_option("--confint-restriction", confint_restriction, "Restriction used for interval integrals");
    app.add_option("--batch-size", batch_size, "Observations per curve update");
    app.add_option("--batch-fraction", batch_fraction, "Batch as a fraction of observations absorbed so far");
    app.add_option("--knots", knots, "Final number of interior knots");
    app.add_option("--degree", degree, "Spline degree");
    app.add_option("--link", link, "logit or cloglog");
    app.add_option("--eval-times", eval_times, "Comma separated interval times");
    app.add_option("--seed", seed, "Random seed");
    app.add_option("--t-max", t_max, "Curve domain upper bound");
  }

  void apply(FederationConfig& f) const {
    if (restriction) f.policy.restriction = *restriction;
    if (confint_restriction) f.confint_policy.restriction = *confint_restriction;
    if (batch_size && batch_fraction) throw ValidationError("--batch-size and --batch-fraction are exclusive");
    if (batch_size) {
      f.batch_size = *batch_size;
      f.batch_fraction.reset();
    }
    if (batch_fraction) f.batch_fraction = *batch_fraction;
    if (knots) f.knots = *knots;
    if (degree) f.degree = *degree;
    if (link) f.link = link_from_string(*link);
    if (t_max) f.t_max = *t_max;
    if (eval_times) {
      f.eval_times.clear();
      std::stringstream ss(*eval_times);
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          std::size_t used = 0;
          f.eval_times.push_back(std::stod(item, &used));
          if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
          throw ProtocolError("eval_times", "cannot parse '" + item + "'");
        }
      }
    }
  }
};

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

template <class F>
std::string capture(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& site_args,
            const std::optional<std::string>& mode, const std::optional<std::string>& out_dir,
            const std::optional<std::string>& messages_dir, const Overrides& ov, std::ostream& out) {
  StudyConfig cfg;
  if (!config_path.empty()) {
    cfg = load_study_config(config_path);
  }
  if (!site_args.empty()) {
    cfg.site_files.assign(site_args.begin(), site_args.end());
    cfg.order.clear();
  }
  if (mode) cfg.federation.method = method_from_string(*mode);
  if (out_dir) cfg.out_dir = *out_dir;
  ov.apply(cfg.federation);
  if (ov.seed) cfg.seed = *ov.seed;
  cfg.validate();

  const auto sites = load_sites(cfg);
  fs::create_directories(cfg.out_dir);
  MessageObserver observer;
  std::size_t counter = 0;
  if (messages_dir) {
    fs::create_directories(*messages_dir);
    observer = [&](const std::string& site, PassId pass, const std::string& bytes) {
      std::ostringstream name;
      name << std::setw(3) << std::setfill('0') << ++counter << '_' << to_string(pass) << '_' << site << ".json";
      write_file(fs::path(*messages_dir) / name.str(), bytes);
    };
  }
  const StudyResult result = run_study(sites, cfg.federation, observer);
  write_file(cfg.out_dir / "result.json", capture([&](std::ostream& os) { write_result_json(os, result); }));
  write_file(cfg.out_dir / "curves.csv", capture([&](std::ostream& os) { write_curves_csv(os, result); }));
  write_file(cfg.out_dir / "logrank.txt", capture([&](std::ostream& os) { write_logrank_summary(os, result); }));
  out << "wrote " << (cfg.out_dir / "result.json").string() << ", curves.csv and logrank.txt ("
      << sites.size() << " sites, method " << to_string(result.method) << ")\n";
  for (const auto& w : result.warnings) out << "warning: " << w << '\n';
  return 0;
}

int cmd_simulate(const std::string& scenario, std::size_t repeats, double hr, const std::string& mode,
                 bool unit_weights, unsigned threads, const std::string& out_dir, const Overrides& ov,
                 std::ostream& out) {
  if (repeats < 1) throw ValidationError("--repeats must be >= 1");
  const Scenario s = Scenario::preset(scenario_from_string(scenario), hr);
  const Calibration calib = calibrate(s);
  SimulationConfig sim;
  sim.federation = scenario_config(s, calib);
  sim.federation.method = method_from_string(mode);
  sim.federation.force_unit_weights = unit_weights;
  ov.apply(sim.federation);
  sim.repeats = repeats;
  sim.seed = ov.seed.value_or(1);
  sim.threads = threads;

  const auto start = std::chrono::steady_clock::now();
  const SimMetrics m = evaluate(s, sim);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "metrics.json", capture([&](std::ostream& os) { write_metrics_json(os, m); }));
  write_file(fs::path(out_dir) / "repeats.csv", capture([&](std::ostream& os) { write_repeats_csv(os, m); }));
  out << "scenario " << to_string(s.id) << " hr " << hr << ": " << m.repeats << " repeats (" << m.failures
      << " failed) in " << std::fixed << std::setprecision(1) << secs << " s\n";
  out << std::setprecision(4);
  for (std::size_t q = 0; q < 4; ++q) {
    out << "  t=" << m.calibration.quantile_times[q] << " mad=" << m.mean_abs_deviation[q]
        << " bias=" << m.bias_distributed[q] << " coverage=" << m.coverage_distributed[q]
        << " pooled_coverage=" << m.coverage_pooled[q] << '\n';
  }
  out << "  rejection distributed=" << m.rejection_distributed << " pooled=" << m.rejection_pooled;
  if (sim.federation.method == Method::ipw) {
    out << " weighted=" << m.rejection_weighted << " pooled_weighted=" << m.rejection_pooled_weighted;
  }
  out << '\n';
  return 0;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open message file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const SiteMessage msg = deserialize_message(bytes);
  if (has_record_level_fields(bytes)) throw ProtocolError("<root>", "message carries record-level fields");

  out << "protocol_version: " << msg.protocol_version << '\n'
      << "pass: " << to_string(msg.pass_id) << '\n'
      << "method: " << to_string(msg.method) << '\n'
      << "bytes: " << bytes.size() << '\n';
  for (Group g : kAllGroups) {
    const auto& p = msg.group_params[index(g)];
    if (!p) continue;
    out << to_string(g) << ": link " << to_string(p->link) << ", degree " << p->degree << ", t_max " << p->t_max
        << ", " << p->knots.size() << " knots [";
    for (std::size_t i = 0; i < p->knots.size(); ++i) out << (i ? " " : "") << p->knots[i];
    out << "], coefficients " << p->beta_surv.size() << "+" << p->beta_atrisk.size() << ", n_cum " << p->n_cum
        << '\n';
  }
  const auto& a = msg.accumulators;
  out << "accumulators: " << a.eval_times.size() << " eval times, " << kGroupCount << " groups, n_total "
      << a.n_total << '\n';
  if (msg.propensity) {
    out << "propensity: " << msg.propensity->coef.size() << " coefficients, n_cum " << msg.propensity->n_cum << '\n';
  }
  out << "sites visited: " << msg.site_trace.size() << '\n';
  for (const auto& e : msg.site_trace) out << "  " << e.site_id << " n=" << e.n << " at " << e.timestamp << '\n';
  out << "fields:\n";
  for (const auto& line : message_inventory(msg)) out << "  " << line << '\n';
  out << "privacy: no individual-level fields; every array is sized by the model, not by site record counts\n";
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Distributed Kaplan-Meier estimation from shared spline summaries"};
  app.require_subcommand(1);

  Overrides run_ov, sim_ov;
  std::string config_path;
  std::vector<std::string> site_files;
  std::optional<std::string> mode, out_dir, messages_dir;
  auto* run_cmd = app.add_subcommand("run", "Run a federation over per-site CSV files");
  run_cmd->add_option("--config", config_path, "Study config (TOML or JSON)");
  run_cmd->add_option("--site", site_files, "Site CSV file (repeatable, overrides the config)");
  run_cmd->add_option("--mode", mode, "unweighted or ipw");
  run_cmd->add_option("--out-dir", out_dir, "Output folder");
  run_cmd->add_option("--messages-dir", messages_dir, "Keep every site-to-site message here");
  run_ov.add_to(*run_cmd);

  std::string scenario;
  std::size_t repeats = 200;
  double hr = 1.0;
  std::string sim_mode = "unweighted";
  bool unit_weights = false;
  unsigned threads = 0;
  std::string sim_out = ".";
  auto* sim_cmd = app.add_subcommand("simulate", "Repeated simulation of a preset scenario");
  sim_cmd->add_option("scenario", scenario, "A, B, C, D or E")->required();
  sim_cmd->add_option("--repeats", repeats, "Number of repeats");
  sim_cmd->add_option("--hr", hr, "Treatment hazard ratio");
  sim_cmd->add_option("--mode", sim_mode, "unweighted or ipw");
  sim_cmd->add_flag("--unit-weights", unit_weights, "IPW pass with all weights set to 1");
  sim_cmd->add_option("--threads", threads, "Worker threads (0 = all cores)");
  sim_cmd->add_option("--out-dir", sim_out, "Output folder");
  sim_ov.add_to(*sim_cmd);

  std::string message_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "Summarise a serialized site message");
  inspect_cmd->add_option("message", message_path, "Message JSON file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "dkm-error: usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*run_cmd) return cmd_run(config_path, site_files, mode, out_dir, messages_dir, run_ov, out);
    if (*sim_cmd) return cmd_simulate(scenario, repeats, hr, sim_mode, unit_weights, threads, sim_out, sim_ov, out);
    if (*inspect_cmd) return cmd_inspect(message_path, out);
  } catch (const ValidationError& e) {
    err << "dkm-error: validation: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "dkm-error: numeric: " << one_line(e.what()) << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "dkm-error: io: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 1;
}

}  // namespace dkm::cli
