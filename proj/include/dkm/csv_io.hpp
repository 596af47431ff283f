#pragma once

#include <istream>
#include <string>
#include <vector>

#include "dkm/surv_core.hpp"

namespace dkm {

/// Parsed site file. Column layout: `time,event[,arm][,z1..zp][,weight]`,
/// header required.
struct RecordTable {
  std::vector<SurvivalRecord> records;
  bool has_arm = false;
  bool has_weight = false;
  std::vector<std::string> covariate_names;
};

RecordTable read_records_csv(std::istream& in, const std::string& source_name = "<stream>");
RecordTable read_records_csv_file(const std::string& path);

void write_records_csv(std::ostream& out, const std::vector<SurvivalRecord>& records);

}  // namespace dkm
