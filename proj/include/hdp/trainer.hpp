#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hdp/detector.hpp"
#include "hdp/eval.hpp"
#include "hdp/losses.hpp"
#include "hdp/synthdata.hpp"
#include "hdp/uap.hpp"

namespace hdp::train {

enum class Method { kHdp, kSft, kJoint };

std::string to_string(Method m);
Method parse_method(const std::string& name);

/// Toggles for the three preserve-mechanism terms.
struct Components {
  bool entropy = true;         // pseudo-forged entropy E
  bool distill_pseudo = true;  // L_p on pseudo-forged samples
  bool distill_real = true;    // L_r on real samples

  bool any() const { return entropy || distill_pseudo || distill_real; }
  std::string code() const;  // e.g. "111" in (E, L_p, L_r) order
  static Components from_code(const std::string& code);
};

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-5;
  int batch_size = 64;
  int epochs_per_stage = 10;
  double beta = 1.0;
  std::uint64_t seed = 0;
  uap::UAPConfig uap;
  int buffer_per_stage = 0;
  Method method = Method::kHdp;
  Components components;
  loss::FeatureDistance distance = loss::FeatureDistance::kSquaredL2;
  /// Reference extractor widths.
  std::vector<int> widths{16, 32, 64};

  void validate() const;
};

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(std::size_t n, double lr, double weight_decay);
  void step(std::span<float> params, std::span<const float> grads);
  long steps() const { return t_; }

 private:
  double lr_, wd_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<double> m_, v_;
};

/// Everything computed for one optimization step, captured before the
/// parameter update. Only materialized when an observer is installed.
struct BatchRecord {
  int stage_id = 0;
  int epoch = 0;
  long batch_index = 0;  // counts batches within the stage
  int uap_index = -1;    // pool entry used, -1 when none
  int feature_dim = 0;
  std::vector<int> labels;
  std::vector<float> probs;
  std::vector<float> pseudo_probs;
  std::vector<float> real_images;    // real half of the batch, NCHW
  std::vector<float> pseudo_images;  // real half + perturbation
  std::vector<float> student_real_features, teacher_real_features;
  std::vector<float> student_pseudo_features, teacher_pseudo_features;
  loss::LossBreakdown loss;
  const Model* student = nullptr;
  const Model* teacher = nullptr;
};

using BatchObserver = std::function<void(const BatchRecord&)>;

struct StageLosses {
  loss::LossBreakdown mean_final_epoch;
  std::vector<double> epoch_mean_total;
  long batches = 0;
};

struct StageResult {
  int stage_id = 0;
  StageLosses losses;
  double wall_seconds = 0;
  std::string checkpoint_path;
  std::string uap_path;
  std::optional<uap::Perturbation> uap;  // perturbation generated after this stage (HDP)
};

/// Training sample reference; `buffered` samples only contribute to L_ce.
struct TrainItem {
  const Image* image = nullptr;
  int label = 0;
  bool buffered = false;
};

std::vector<TrainItem> stage_items(const synth::StageDataset& stage);

/// Seeded-uniform ceil(k/2) real + floor(k/2) fake training samples.
std::vector<TrainItem> select_buffer(const synth::StageDataset& stage, int k, std::uint64_t seed);

Model make_model(const TrainConfig& cfg, Shape shape);

/// Plain cross-entropy training on one stage.
StageLosses train_stage_base(Model& model, const synth::StageDataset& stage, const TrainConfig& cfg,
                             std::span<const TrainItem> extra = {}, const BatchObserver& observer = {});

/// One stage of the preserve mechanism: cross entropy plus pseudo-forged
/// entropy and feature distillation against the frozen teacher, with pool
/// entries cycled round-robin per batch.
StageLosses train_stage_hdp(Model& model, const Model& teacher, const synth::StageDataset& stage,
                            const uap::UAPPool& pool, const TrainConfig& cfg, std::span<const TrainItem> extra = {},
                            const BatchObserver& observer = {});

struct RunOptions {
  /// When set, per-stage checkpoints, perturbations and StageResult JSON are
  /// written below this directory.
  std::optional<std::filesystem::path> out_dir;
  BatchObserver on_batch;
  std::function<void(const std::string&)> log;
};

struct RunResult {
  Model model;
  uap::UAPPool pool;
  std::vector<StageResult> stages;
  eval::EvalMatrix acc;
  eval::EvalMatrix auc;
};

RunResult run_protocol_hdp(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                           const RunOptions& opts = {});
RunResult run_protocol_sft(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                           const RunOptions& opts = {});
/// Single training run on the union of all stages; only the final matrix
/// row is filled.
RunResult run_protocol_joint(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                             const RunOptions& opts = {});

RunResult run_protocol(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                       const RunOptions& opts = {});

}  // namespace hdp::train
