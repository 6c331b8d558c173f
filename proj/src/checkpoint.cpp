#include "hdp/checkpoint.hpp"

#include <json.hpp>

#include "hdp/binary_io.hpp"
#include "hdp/error.hpp"

namespace hdp {

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const Shape s = model.input_shape();
  const nlohmann::json meta{{"arch", model.arch_id()},
                            {"feature_dim", model.feature_dim()},
                            {"input_shape", {s.channels, s.height, s.width}},
                            {"stage", model.creation_stage()},
                            {"param_count", model.params().size()}};
  const std::string text = meta.dump();
  io::Writer w;
  w.bytes("HDPM");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  w.f32s(model.params());
  w.save(path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  auto r = io::Reader::from_file(path);
  if (r.remaining() < 4 || r.bytes(4) != "HDPM") fail(ErrorKind::kCorruptFile, path.string() + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    fail(ErrorKind::kVersionMismatch, path.string() + ": checkpoint version " + std::to_string(version) +
                                          ", expected " + std::to_string(kCheckpointVersion));
  const std::uint32_t meta_len = r.u32();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, path.string() + ": bad metadata: " + e.what());
  }
  Shape s;
  std::string arch;
  std::size_t count = 0;
  int stage = 0;
  try {
    s = Shape{meta.at("input_shape").at(0).get<int>(), meta.at("input_shape").at(1).get<int>(),
              meta.at("input_shape").at(2).get<int>()};
    arch = meta.at("arch").get<std::string>();
    count = meta.at("param_count").get<std::size_t>();
    stage = meta.value("stage", 0);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, path.string() + ": incomplete metadata: " + e.what());
  }
  Model model(make_extractor<float>(arch, s), 0);
  if (model.params().size() != count)
    fail(ErrorKind::kCorruptFile, path.string() + ": parameter count does not match architecture");
  const auto values = r.f32s(count);
  if (r.remaining() != 0) fail(ErrorKind::kCorruptFile, path.string() + ": trailing bytes");
  auto p = model.mutable_params();
  std::copy(values.begin(), values.end(), p.begin());
  model.set_creation_stage(stage);
  return model;
}

}  // namespace hdp
