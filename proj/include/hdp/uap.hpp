#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "hdp/detector.hpp"
#include "hdp/image.hpp"

namespace hdp::uap {

struct UAPConfig {
  double epsilon = 0.15;
  double alpha = 1e-4;
  double sigma = 0.8;  // attack-rate threshold in (0, 1]
  int max_iters = 5000;
  int gen_subset_size = 1000;
  int batch_size = 64;
  /// Literal sign of the printed update rule (descends log P(fake)).
  bool reverse_sign = false;
  /// Clamp x + delta to [0, 1] in generation and replay.
  bool clamp_pseudo = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// A universal perturbation with its generation record.
struct Perturbation {
  Shape shape;
  std::vector<float> delta;  // CHW
  float epsilon = 0.15f;
  int stage_id = 0;
  float achieved_attack_rate = 0;
  int iterations_used = 0;
  /// False when max_iters ran out before the attack rate reached sigma.
  bool sigma_reached = true;

  static Perturbation zeros(Shape shape, float epsilon, int stage_id = 0);
  float max_abs() const;
};

/// x + delta for every image in an NCHW batch (optionally clamped to [0,1]).
std::vector<float> make_pseudo(std::span<const float> reals, const Perturbation& p, bool clamp = false);

/// Fraction of `reals` predicted fake after adding the perturbation.
double attack_rate(const Model& model, std::span<const Image* const> reals, const Perturbation& p,
                   bool clamp = false);

/// One projected sign step that raises mean log f(x + delta) over the batch
/// (lowers it with cfg.reverse_sign), then clips delta to [-epsilon, epsilon].
Perturbation uap_step(const Perturbation& p, std::span<const float> batch, const Model& model, double alpha,
                      double epsilon, bool reverse_sign = false, bool clamp = false);

/// Called after every step with the 1-based iteration count.
using StepObserver = std::function<void(int iteration, const Perturbation& current)>;

Perturbation generate_uap(const Model& model, std::span<const Image* const> reals, const UAPConfig& cfg,
                          int stage_id, const StepObserver& observer = {});

inline constexpr std::uint32_t kUapVersion = 1;
inline constexpr std::size_t kUapHeaderBytes = 36;

/// "HDPU", u32 version, u32 C, H, W, f32 epsilon, f32 attack rate,
/// u32 stage_id, u32 iterations_used, then C*H*W float32 deltas.
void write_perturbation(const std::filesystem::path& path, const Perturbation& p);
Perturbation read_perturbation(const std::filesystem::path& path);

/// Ordered historical pool, one perturbation per finished stage.
class UAPPool {
 public:
  /// Stage ids must continue the sequence 1, 2, 3, ...
  void append(Perturbation p);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Perturbation& at(std::size_t i) const { return entries_.at(i); }
  const std::vector<Perturbation>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Writes uap_stage_XX.bin files plus pool.json into `dir`.
  void save(const std::filesystem::path& dir) const;
  static UAPPool load(const std::filesystem::path& dir);

  static std::string file_name(int stage_id);

 private:
  std::vector<Perturbation> entries_;
};

}  // namespace hdp::uap
