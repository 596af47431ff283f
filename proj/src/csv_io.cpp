#include "dkm/csv_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dkm/error.hpp"

namespace dkm {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& text, const std::string& where) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError(where + ": cannot parse number '" + text + "'");
  }
  return value;
}

int parse_binary(const std::string& text, const std::string& where) {
  const double v = parse_number(text, where);
  if (v != 0.0 && v != 1.0) throw ValidationError(where + ": expected 0 or 1, got '" + text + "'");
  return static_cast<int>(v);
}

}  // namespace

RecordTable read_records_csv(std::istream& in, const std::string& source_name) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(source_name + ": missing header row");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = split_line(line);

  int time_col = -1, event_col = -1, arm_col = -1, weight_col = -1;
  std::vector<int> cov_cols;
  RecordTable table;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& name = header[c];
    const int ci = static_cast<int>(c);
    if (name == "time") {
      time_col = ci;
    } else if (name == "event") {
      event_col = ci;
    } else if (name == "arm") {
      arm_col = ci;
    } else if (name == "weight") {
      weight_col = ci;
    } else if (!name.empty() && name[0] == 'z') {
      cov_cols.push_back(ci);
      table.covariate_names.push_back(name);
    } else {
      throw ValidationError(source_name + ": unknown column '" + name + "'");
    }
  }
  if (time_col < 0 || event_col < 0) {
    throw ValidationError(source_name + ": header must contain 'time' and 'event'");
  }
  table.has_arm = arm_col >= 0;
  table.has_weight = weight_col >= 0;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_line(line);
    const std::string where = source_name + ":" + std::to_string(line_no);
    if (fields.size() != header.size()) {
      throw ValidationError(where + ": expected " + std::to_string(header.size()) + " fields");
    }
    SurvivalRecord r;
    r.time = parse_number(fields[time_col], where);
    r.event = parse_binary(fields[event_col], where);
    if (arm_col >= 0) r.arm = parse_binary(fields[arm_col], where);
    for (int c : cov_cols) r.covariates.push_back(parse_number(fields[c], where));
    if (weight_col >= 0) r.weight = parse_number(fields[weight_col], where);
    table.records.push_back(std::move(r));
  }
  try {
    validate_records(table.records);
  } catch (const ValidationError& e) {
    throw ValidationError(source_name + ": " + e.what());
  }
  return table;
}

RecordTable read_records_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open site file '" + path + "'");
  return read_records_csv(in, path);
}

void write_records_csv(std::ostream& out, const std::vector<SurvivalRecord>& records) {
  const bool has_arm = !records.empty() && records.front().arm.has_value();
  const std::size_t p = records.empty() ? 0 : records.front().covariates.size();
  out << "time,event";
  if (has_arm) out << ",arm";
  for (std::size_t j = 0; j < p; ++j) out << ",z" << (j + 1);
  out << "\n";
  char buf[32];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.17g", r.time);
    out << buf << ',' << r.event;
    if (has_arm) out << ',' << r.arm.value_or(0);
    for (double z : r.covariates) {
      std::snprintf(buf, sizeof buf, "%.17g", z);
      out << ',' << buf;
    }
    out << "\n";
  }
}

}  // namespace dkm
