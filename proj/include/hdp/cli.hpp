#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "hdp/report.hpp"
#include "hdp/synthdata.hpp"
#include "hdp/trainer.hpp"

namespace hdp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

inline constexpr const char* kToolVersion = "0.1.0";

/// Entry point shared by the `hdp` binary and the tests. Output goes to the
/// given streams instead of the process-wide ones.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

/// Binary launched by `sweep --jobs N` (N > 1); main() sets it to itself.
void set_executable(const std::filesystem::path& path);

/// Flat `key = value` file; blank lines and lines starting with '#' are
/// skipped. Keys are flag names without the leading dashes.
std::map<std::string, std::string> parse_config_text(const std::string& text);

/// Splices config entries into `args` for every flag the command line does not
/// already set, so explicit flags win.
std::vector<std::string> apply_config(std::vector<std::string> args, const std::map<std::string, std::string>& config);

/// One axis of a sweep, e.g. "sigma=0.6,0.8,1.0". Components values are
/// 3-character E/L_p/L_r codes or "*" for all eight.
struct GridAxis {
  std::string name;
  std::vector<std::string> values;
};
GridAxis parse_grid_axis(const std::string& text);

struct GridPoint {
  std::string label;
  std::vector<std::pair<std::string, std::string>> settings;
};
/// Cartesian product in axis order, last axis fastest.
std::vector<GridPoint> expand_grid(const std::vector<GridAxis>& axes);

/// Resolves a preset name or a protocol JSON path. Presets take their data
/// seed from `seed`.
synth::ProtocolSpec resolve_protocol(const std::string& name_or_path, std::uint64_t seed, int train_per_class,
                                     int test_per_class);

/// One row of the `report` table; formatted cells are shared by the table
/// and the CSV output.
struct ReportRow {
  std::string name;
  std::string protocol;
  std::uint64_t seed = 0;
  std::string avg_acc, avg_auc, pre_acc, pre_auc;
};
ReportRow make_row(const MetricsReport& r);
std::string format_metric(const std::optional<double>& v);

/// report.json files below `dir`, sorted by path.
std::vector<std::filesystem::path> find_reports(const std::filesystem::path& dir);

}  // namespace hdp::cli
