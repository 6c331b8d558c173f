#pragma once

#include <cstdint>
#include <filesystem>

#include "hdp/detector.hpp"

namespace hdp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "HDPM", u32 version, u32 metadata length, JSON metadata
/// {arch, feature_dim, input_shape, stage, param_count}, then param_count
/// little-endian float32 values in Detector::params() order (extractor
/// layers conv1.w, conv1.b, conv2.w, ... then head weights, head bias).
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace hdp
