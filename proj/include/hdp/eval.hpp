#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hdp/detector.hpp"
#include "hdp/synthdata.hpp"

namespace hdp::eval {

/// 100 * matches / total.
double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Rank-based (Mann-Whitney) ROC AUC in percent; label 1 is the positive
/// (fake) class and ties earn half credit.
template <typename T>
double auc(std::span<const T> scores, std::span<const int> labels);

struct TaskScore {
  double acc = 0;
  double auc = 0;
};

/// Fake-probabilities and labels over a stage's test split (reals first).
struct ScoredSet {
  std::vector<float> scores;
  std::vector<int> preds;
  std::vector<int> labels;
};

ScoredSet score_stage(const Model& model, const synth::StageDataset& stage);
TaskScore evaluate_model(const Model& model, const synth::StageDataset& stage);

/// R[t][j]: metric of the model after stage t on task j (both 1-based).
class EvalMatrix {
 public:
  EvalMatrix() = default;
  explicit EvalMatrix(int tasks) : tasks_(tasks), cells_(static_cast<std::size_t>(tasks) * tasks) {}

  int tasks() const { return tasks_; }
  void set(int stage, int task, double value);
  std::optional<double> get(int stage, int task) const;
  bool row_complete(int stage) const;

  bool operator==(const EvalMatrix&) const = default;

 private:
  std::size_t index(int stage, int task) const;

  int tasks_ = 0;
  std::vector<std::optional<double>> cells_;
};

/// Mean of the last row.
double avg_metric(const EvalMatrix& r);
/// Stage-averaged mean over previously seen tasks:
/// (1/(T-1)) * sum_{t=2..T} mean_{j<t} R[t][j].
double pre_metric(const EvalMatrix& r);
/// Final-row variant: mean_{j<T} R[T][j].
double pre_final_metric(const EvalMatrix& r);

struct DumpSample {
  int sample_id = 0;
  int stage_id = 0;
  std::string kind;  // real, fake or pseudo
  const float* pixels = nullptr;
};

/// CSV: sample_id,stage_id,kind,f0..f{d-1}, one row per sample.
void feature_dump(const Model& model, std::span<const DumpSample> samples, const std::filesystem::path& path);

/// Parsed feature dump.
struct FeatureTable {
  std::vector<int> sample_ids;
  std::vector<int> stage_ids;
  std::vector<std::string> kinds;
  int dim = 0;
  std::vector<float> features;  // rows x dim
};
FeatureTable read_feature_dump(const std::filesystem::path& path);

}  // namespace hdp::eval
