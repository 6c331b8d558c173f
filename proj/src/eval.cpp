#include "hdp/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hdp/error.hpp"

namespace hdp::eval {

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  require(preds.size() == labels.size(), ErrorKind::kLengthMismatch, "predictions and labels differ in length");
  require(!preds.empty(), ErrorKind::kEmptyBatch, "accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

template <typename T>
double auc(std::span<const T> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorKind::kLengthMismatch, "scores and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) pos += y == 1 ? 1 : 0;
  const std::size_t neg = labels.size() - pos;
  require(pos > 0 && neg > 0, ErrorKind::kSingleClass, "AUC needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the positive rank sum keeps tied (half-integer) ranks integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const std::uint64_t twice_avg_rank = static_cast<std::uint64_t>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) twice_rank_sum += twice_avg_rank;
    i = j + 1;
  }
  // 2*U = 2*R_pos - pos*(pos+1); U counts correctly ordered pairs plus half ties.
  const double twice_u = static_cast<double>(twice_rank_sum - pos * (pos + 1));
  return 100.0 * (twice_u / 2.0) / (static_cast<double>(pos) * static_cast<double>(neg));
}

template double auc<float>(std::span<const float>, std::span<const int>);
template double auc<double>(std::span<const double>, std::span<const int>);

ScoredSet score_stage(const Model& model, const synth::StageDataset& stage) {
  std::vector<const Image*> images;
  ScoredSet out;
  for (const auto& s : stage.test_real) {
    images.push_back(&s.image);
    out.labels.push_back(0);
  }
  for (const auto& s : stage.test_fake) {
    images.push_back(&s.image);
    out.labels.push_back(1);
  }
  require(!images.empty(), ErrorKind::kEmptyBatch, "stage has no test samples");
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto chunk = std::span<const Image* const>(images).subspan(start, std::min(kChunk, images.size() - start));
    const auto probs = model.forward_prob(stack_images(chunk));
    for (float p : probs) {
      out.scores.push_back(p);
      out.preds.push_back(p >= 0.5f ? 1 : 0);
    }
  }
  return out;
}

TaskScore evaluate_model(const Model& model, const synth::StageDataset& stage) {
  const auto scored = score_stage(model, stage);
  return TaskScore{accuracy(scored.preds, scored.labels), auc<float>(scored.scores, scored.labels)};
}

std::size_t EvalMatrix::index(int stage, int task) const {
  require(stage >= 1 && stage <= tasks_ && task >= 1 && task <= tasks_, ErrorKind::kInvalidArgument,
          "matrix index out of range");
  return static_cast<std::size_t>(stage - 1) * tasks_ + static_cast<std::size_t>(task - 1);
}

void EvalMatrix::set(int stage, int task, double value) { cells_[index(stage, task)] = value; }

std::optional<double> EvalMatrix::get(int stage, int task) const { return cells_[index(stage, task)]; }

bool EvalMatrix::row_complete(int stage) const {
  for (int j = 1; j <= tasks_; ++j)
    if (!get(stage, j)) return false;
  return true;
}

namespace {

double cell(const EvalMatrix& r, int t, int j) {
  const auto v = r.get(t, j);
  if (!v) fail(ErrorKind::kIncompleteMatrix, "missing R[" + std::to_string(t) + "][" + std::to_string(j) + "]");
  return *v;
}

}  // namespace

double avg_metric(const EvalMatrix& r) {
  require(r.tasks() >= 1, ErrorKind::kIncompleteMatrix, "empty matrix");
  const int t = r.tasks();
  double acc = 0;
  for (int j = 1; j <= t; ++j) acc += cell(r, t, j);
  return acc / t;
}

double pre_metric(const EvalMatrix& r) {
  const int big_t = r.tasks();
  require(big_t >= 2, ErrorKind::kInvalidArgument, "PRE needs at least two stages");
  double outer = 0;
  for (int t = 2; t <= big_t; ++t) {
    double inner = 0;
    for (int j = 1; j < t; ++j) inner += cell(r, t, j);
    outer += inner / (t - 1);
  }
  return outer / (big_t - 1);
}

double pre_final_metric(const EvalMatrix& r) {
  const int big_t = r.tasks();
  require(big_t >= 2, ErrorKind::kInvalidArgument, "PRE needs at least two stages");
  double acc = 0;
  for (int j = 1; j < big_t; ++j) acc += cell(r, big_t, j);
  return acc / (big_t - 1);
}

void feature_dump(const Model& model, std::span<const DumpSample> samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIOFailure, "cannot open " + path.string());
  const int d = model.feature_dim();
  out << "sample_id,stage_id,kind";
  for (int j = 0; j < d; ++j) out << ",f" << j;
  out << '\n';
  const std::size_t per = model.input_shape().size();
  constexpr std::size_t kChunk = 256;
  char buf[32];
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t end = std::min(samples.size(), start + kChunk);
    std::vector<float> batch;
    batch.reserve((end - start) * per);
    for (std::size_t i = start; i < end; ++i) batch.insert(batch.end(), samples[i].pixels, samples[i].pixels + per);
    const auto feats = model.features(batch);
    for (std::size_t i = start; i < end; ++i) {
      out << samples[i].sample_id << ',' << samples[i].stage_id << ',' << samples[i].kind;
      for (int j = 0; j < d; ++j) {
        // %.9g round-trips float32 exactly.
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(feats[(i - start) * d + j]));
        out << ',' << buf;
      }
      out << '\n';
    }
  }
  if (!out) fail(ErrorKind::kIOFailure, "short write to " + path.string());
}

FeatureTable read_feature_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIOFailure, "cannot open " + path.string());
  FeatureTable table;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::kCorruptFile, "empty feature dump");
  table.dim = static_cast<int>(std::count(line.begin(), line.end(), ',')) - 2;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    table.sample_ids.push_back(std::stoi(field));
    std::getline(ss, field, ',');
    table.stage_ids.push_back(std::stoi(field));
    std::getline(ss, field, ',');
    table.kinds.push_back(field);
    int cols = 0;
    while (std::getline(ss, field, ',')) {
      table.features.push_back(std::stof(field));
      ++cols;
    }
    if (cols != table.dim) fail(ErrorKind::kCorruptFile, "feature row width differs from header");
  }
  return table;
}

}  // namespace hdp::eval
