#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hdp/image.hpp"

namespace hdp::synth {

/// Appearance statistics of one image domain. Two stages with different
/// DomainParams produce visibly different "real" distributions.
struct DomainParams {
  int blob_count = 6;
  double blob_scale = 0.12;    // Gaussian sigma as a fraction of min(H, W)
  double noise_cutoff = 0.5;   // kept spatial-frequency fraction, (0, 1]
  double noise_amp = 0.05;     // [0, 0.5]
  std::uint64_t palette_seed = 1;

  void validate() const;
  bool operator==(const DomainParams&) const = default;
};

enum class ManipulationKind { kBlend, kNoisePatch, kPatchShuffle, kSmooth, kSharpen, kColorShift };

std::string to_string(ManipulationKind kind);
ManipulationKind parse_manipulation_kind(const std::string& name);

/// Elliptical region; all values are fractions of the image height/width.
struct Region {
  double center_y = 0.5;
  double center_x = 0.5;
  double radius_y = 0.35;
  double radius_x = 0.35;
  bool operator==(const Region&) const = default;
};

struct ManipulationSpec {
  ManipulationKind kind = ManipulationKind::kSmooth;
  double strength = 1.0;
  Region region;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ManipulationSpec&) const = default;
};

struct Sample {
  Image image;
  int label = 0;  // 0 real, 1 fake
  int stage_id = 1;
  std::optional<ManipulationSpec> manipulation;
  std::uint64_t seed = 0;  // seed of the underlying real draw
};

struct StageSizes {
  int train_per_class = 1000;
  int test_per_class = 200;
  bool operator==(const StageSizes&) const = default;
};

struct StageSpec {
  DomainParams domain;
  ManipulationSpec manipulation;
  StageSizes sizes;
  bool operator==(const StageSpec&) const = default;
};

struct ProtocolSpec {
  std::string name;
  Shape shape;
  std::vector<StageSpec> stages;
  std::uint64_t global_seed = 0;

  void validate() const;
};

struct StageDataset {
  int stage_id = 0;
  std::vector<Sample> train_real;
  std::vector<Sample> train_fake;
  std::vector<Sample> test_real;
  std::vector<Sample> test_fake;
};

struct Blob {
  double center_y = 0;  // pixel units
  double center_x = 0;
  double sigma = 1;
  std::array<double, 3> color{};
};

/// Blob layout drawn by gen_real_image for (domain, sample_seed).
std::vector<Blob> real_image_blobs(const DomainParams& domain, Shape shape, std::uint64_t sample_seed);

Image gen_real_image(const DomainParams& domain, std::uint64_t sample_seed, Shape shape = {});

/// Returns a manipulated copy; `donor` is required exactly for BLEND.
Image apply_manipulation(const Image& img, const ManipulationSpec& spec, const Image* donor = nullptr);

/// 3x3 box blur with edge replication.
Image box_blur3(const Image& img);

/// Mean squared residual between the image and its 3x3 box blur.
double high_frequency_energy(const Image& img);

/// Stream labels folded into the per-sample seed hash.
enum class SeedStream : std::uint64_t { kReal = 0, kFakeSource = 1, kDonor = 2, kManipulation = 3 };

/// hash(global_seed, stage_id, stream, index). Train samples use indices
/// [0, train_per_class), test samples continue from train_per_class.
std::uint64_t sample_seed(std::uint64_t global_seed, int stage_id, SeedStream stream, std::uint64_t index);

StageDataset build_stage(const StageSpec& spec, int stage_id, std::uint64_t global_seed, Shape shape = {});

std::vector<StageDataset> build_protocol(const ProtocolSpec& spec);

/// Built-in protocols "p1", "p2", "p3".
ProtocolSpec preset(const std::string& name, std::uint64_t global_seed = 0, StageSizes sizes = {});
bool is_preset_name(const std::string& name);

std::string protocol_to_json(const ProtocolSpec& spec);
ProtocolSpec protocol_from_json(const std::string& text);

/// Raw image file: "HDPI", u32 C, H, W, then float32 CHW pixels (little endian).
void write_image(const std::filesystem::path& path, const Image& img);
Image read_image(const std::filesystem::path& path);

/// Writes every sample of a stage as HDPI files plus index.json.
void dump_stage(const StageDataset& stage, const std::filesystem::path& dir);

}  // namespace hdp::synth
