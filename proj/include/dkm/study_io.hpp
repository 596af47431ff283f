#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dkm/federation.hpp"
#include "dkm/simgen.hpp"

namespace dkm {

struct StudyConfig {
  std::vector<std::filesystem::path> site_files;
  /// Site processing order as indices into site_files; empty keeps file order.
  std::vector<std::size_t> order;
  FederationConfig federation;
  std::filesystem::path out_dir = ".";
  std::uint64_t seed = 1;

  void validate() const;
};

/// Flat TOML subset (key = value, strings, numbers, booleans, arrays) with
/// a JSON fallback. Relative site paths resolve against the file's folder.
StudyConfig load_study_config(const std::filesystem::path& path);
StudyConfig parse_study_config(const std::string& text, const std::filesystem::path& base_dir);

/// Site ids are file stems.
std::vector<SiteDataset> load_sites(const StudyConfig& config);

void write_result_json(std::ostream& out, const StudyResult& result);
void write_curves_csv(std::ostream& out, const StudyResult& result);
void write_logrank_summary(std::ostream& out, const StudyResult& result);

void write_metrics_json(std::ostream& out, const SimMetrics& metrics);
void write_repeats_csv(std::ostream& out, const SimMetrics& metrics);

}  // namespace dkm
