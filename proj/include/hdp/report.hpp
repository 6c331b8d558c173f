#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdp/eval.hpp"
#include "hdp/trainer.hpp"

namespace hdp {

/// Summary of one protocol run, serialized as report.json.
struct MetricsReport {
  std::string protocol;
  std::string method;
  std::string label;  // sweep point name, empty for single runs
  std::uint64_t seed = 0;
  double beta = 0;
  int epochs = 0;
  double sigma = 0;
  std::string components;
  int buffer = 0;
  eval::EvalMatrix matrix_acc;
  eval::EvalMatrix matrix_auc;
  std::optional<double> avg_acc, avg_auc;
  std::optional<double> pre_acc, pre_auc;
  std::optional<double> pre_final_acc, pre_final_auc;
  std::vector<double> per_stage_seconds;
  std::string config_hash;
  std::string timestamp;
};

/// Wall-clock fields, excluded when comparing reports for determinism.
inline constexpr const char* kTimingFields[] = {"timestamp", "per_stage_seconds"};

nlohmann::json config_to_json(const train::TrainConfig& cfg);
std::string config_hash(const train::TrainConfig& cfg);

MetricsReport make_report(const train::RunResult& run, const train::TrainConfig& cfg, const std::string& protocol,
                          const std::string& label = {});
/// Recomputes AVG/PRE from the stored matrices (absent when undefined).
void fill_summary(MetricsReport& report);

nlohmann::json report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

/// report_to_json with the wall-clock fields removed.
nlohmann::json strip_timing(nlohmann::json j);

std::string utc_timestamp();

}  // namespace hdp
