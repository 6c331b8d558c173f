#include "hdp/uap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "hdp/binary_io.hpp"
#include "hdp/error.hpp"
#include "hdp/random.hpp"

namespace hdp::uap {

void UAPConfig::validate() const {
  require(epsilon > 0, ErrorKind::kInvalidArgument, "epsilon must be positive");
  require(alpha >= 0, ErrorKind::kInvalidArgument, "alpha must be non-negative");
  require(sigma > 0 && sigma <= 1, ErrorKind::kInvalidArgument, "sigma must be in (0,1]");
  require(max_iters > 0, ErrorKind::kInvalidArgument, "max_iters must be positive");
  require(gen_subset_size > 0, ErrorKind::kInvalidArgument, "gen_subset_size must be positive");
  require(batch_size > 0, ErrorKind::kInvalidArgument, "batch_size must be positive");
}

Perturbation Perturbation::zeros(Shape shape, float epsilon, int stage_id) {
  Perturbation p;
  p.shape = shape;
  p.delta.assign(shape.size(), 0.0f);
  p.epsilon = epsilon;
  p.stage_id = stage_id;
  return p;
}

float Perturbation::max_abs() const {
  float m = 0;
  for (float v : delta) m = std::max(m, std::abs(v));
  return m;
}

std::vector<float> make_pseudo(std::span<const float> reals, const Perturbation& p, bool clamp) {
  const std::size_t per = p.delta.size();
  require(per > 0 && reals.size() % per == 0, ErrorKind::kShapeMismatch,
          "batch does not match perturbation shape " + p.shape.str());
  std::vector<float> out(reals.size());
  for (std::size_t i = 0; i < reals.size(); ++i) {
    const float v = reals[i] + p.delta[i % per];
    out[i] = clamp ? std::clamp(v, 0.0f, 1.0f) : v;
  }
  return out;
}

double attack_rate(const Model& model, std::span<const Image* const> reals, const Perturbation& p, bool clamp) {
  require(!reals.empty(), ErrorKind::kEmptyBatch, "attack rate over no images");
  require(model.input_shape() == p.shape, ErrorKind::kShapeMismatch, "perturbation shape differs from model input");
  constexpr std::size_t kChunk = 256;
  std::size_t fooled = 0;
  for (std::size_t start = 0; start < reals.size(); start += kChunk) {
    const auto chunk = reals.subspan(start, std::min(kChunk, reals.size() - start));
    const auto batch = make_pseudo(stack_images(chunk), p, clamp);
    for (int pred : model.predict(batch)) fooled += static_cast<std::size_t>(pred);
  }
  return static_cast<double>(fooled) / static_cast<double>(reals.size());
}

Perturbation uap_step(const Perturbation& p, std::span<const float> batch, const Model& model, double alpha,
                      double epsilon, bool reverse_sign, bool clamp) {
  require(model.input_shape() == p.shape, ErrorKind::kShapeMismatch, "perturbation shape differs from model input");
  const std::size_t per = p.delta.size();
  require(!batch.empty() && batch.size() % per == 0, ErrorKind::kShapeMismatch, "batch does not match perturbation");
  const auto eps = static_cast<float>(epsilon);
  const auto step = static_cast<float>(alpha);

  Perturbation out = p;
  if (step == 0.0f) return out;

  const std::size_t n = batch.size() / per;
  const auto x = make_pseudo(batch, p, clamp);
  const auto pass = model.forward(x, true);
  // d/dz mean log sigmoid(z) = (1 - sigmoid(z)) / n
  std::vector<float> dlogits(n);
  for (std::size_t i = 0; i < n; ++i) dlogits[i] = (1.0f - sigmoid(pass.logits[i])) / static_cast<float>(n);
  std::vector<float> dinput(batch.size());
  model.backward(pass, dlogits, {}, {}, dinput);

  std::vector<float> grad(per, 0.0f);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (clamp) {
      const float v = batch[i] + p.delta[i % per];
      if (v < 0.0f || v > 1.0f) continue;
    }
    grad[i % per] += dinput[i];
  }
  const float direction = reverse_sign ? -1.0f : 1.0f;
  for (std::size_t j = 0; j < per; ++j) {
    require(std::isfinite(grad[j]), ErrorKind::kNonFiniteGradient, "perturbation gradient is not finite");
    const float sgn = grad[j] > 0.0f ? 1.0f : (grad[j] < 0.0f ? -1.0f : 0.0f);
    out.delta[j] = std::clamp(p.delta[j] + direction * step * sgn, -eps, eps);
  }
  return out;
}

Perturbation generate_uap(const Model& model, std::span<const Image* const> reals, const UAPConfig& cfg,
                          int stage_id, const StepObserver& observer) {
  cfg.validate();
  require(!reals.empty(), ErrorKind::kEmptySubset, "no real images to generate a perturbation from");

  std::vector<const Image*> subset;
  if (reals.size() > static_cast<std::size_t>(cfg.gen_subset_size)) {
    Rng rng(hash_seed({cfg.seed, static_cast<std::uint64_t>(stage_id), 0x5b5e7ULL}));
    auto idx = sample_without_replacement(rng, reals.size(), static_cast<std::size_t>(cfg.gen_subset_size));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) subset.push_back(reals[i]);
  } else {
    subset.assign(reals.begin(), reals.end());
  }

  const Shape shape = model.input_shape();
  Perturbation p = Perturbation::zeros(shape, static_cast<float>(cfg.epsilon), stage_id);
  double rate = attack_rate(model, subset, p, cfg.clamp_pseudo);
  p.achieved_attack_rate = static_cast<float>(rate);
  if (rate >= cfg.sigma) return p;

  Perturbation best = p;
  const std::size_t batch = std::min(subset.size(), static_cast<std::size_t>(cfg.batch_size));
  std::vector<std::size_t> order(subset.size());
  int iters = 0;
  for (std::uint64_t sweep = 0; iters < cfg.max_iters; ++sweep) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(hash_seed({cfg.seed, static_cast<std::uint64_t>(stage_id), sweep}));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size() && iters < cfg.max_iters; start += batch) {
      std::vector<const Image*> chunk;
      for (std::size_t k = start; k < std::min(order.size(), start + batch); ++k) chunk.push_back(subset[order[k]]);
      p = uap_step(p, stack_images(std::span<const Image* const>(chunk)), model, cfg.alpha, cfg.epsilon,
                   cfg.reverse_sign, cfg.clamp_pseudo);
      ++iters;
      p.iterations_used = iters;
      if (observer) observer(iters, p);
    }
    rate = attack_rate(model, subset, p, cfg.clamp_pseudo);
    p.achieved_attack_rate = static_cast<float>(rate);
    if (rate >= cfg.sigma) {
      p.sigma_reached = true;
      return p;
    }
    if (rate > best.achieved_attack_rate) best = p;
  }
  best.iterations_used = iters;
  best.sigma_reached = false;
  return best;
}

void write_perturbation(const std::filesystem::path& path, const Perturbation& p) {
  require(p.delta.size() == p.shape.size(), ErrorKind::kShapeMismatch, "delta does not match its shape");
  io::Writer w;
  w.bytes("HDPU");
  w.u32(kUapVersion);
  w.u32(static_cast<std::uint32_t>(p.shape.channels));
  w.u32(static_cast<std::uint32_t>(p.shape.height));
  w.u32(static_cast<std::uint32_t>(p.shape.width));
  w.f32(p.epsilon);
  w.f32(p.achieved_attack_rate);
  w.u32(static_cast<std::uint32_t>(p.stage_id));
  w.u32(static_cast<std::uint32_t>(p.iterations_used));
  w.f32s(p.delta);
  w.save(path);
}

Perturbation read_perturbation(const std::filesystem::path& path) {
  auto r = io::Reader::from_file(path);
  if (r.remaining() < 4 || r.bytes(4) != "HDPU") fail(ErrorKind::kCorruptFile, path.string() + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kUapVersion)
    fail(ErrorKind::kVersionMismatch, path.string() + ": perturbation version " + std::to_string(version));
  Perturbation p;
  p.shape.channels = static_cast<int>(r.u32());
  p.shape.height = static_cast<int>(r.u32());
  p.shape.width = static_cast<int>(r.u32());
  p.epsilon = r.f32();
  p.achieved_attack_rate = r.f32();
  p.stage_id = static_cast<int>(r.u32());
  p.iterations_used = static_cast<int>(r.u32());
  if (r.remaining() != 4 * p.shape.size()) fail(ErrorKind::kCorruptFile, path.string() + ": payload size mismatch");
  p.delta = r.f32s(p.shape.size());
  return p;
}

std::string UAPPool::file_name(int stage_id) {
  char name[32];
  std::snprintf(name, sizeof(name), "uap_stage_%02d.bin", stage_id);
  return name;
}

void UAPPool::append(Perturbation p) {
  const int expected = entries_.empty() ? 1 : entries_.back().stage_id + 1;
  if (!entries_.empty() && p.stage_id <= entries_.back().stage_id)
    fail(ErrorKind::kDuplicateStage, "stage " + std::to_string(p.stage_id) + " is already in the pool");
  require(p.stage_id == expected, ErrorKind::kInvalidArgument,
          "pool expects stage " + std::to_string(expected) + ", got " + std::to_string(p.stage_id));
  if (!entries_.empty())
    require(p.shape == entries_.front().shape, ErrorKind::kShapeMismatch, "pool entries must share one shape");
  entries_.push_back(std::move(p));
}

void UAPPool::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : entries_) {
    const std::string name = file_name(p.stage_id);
    write_perturbation(dir / name, p);
    manifest.push_back({{"stage_id", p.stage_id},
                        {"file", name},
                        {"epsilon", p.epsilon},
                        {"attack_rate", p.achieved_attack_rate},
                        {"iterations_used", p.iterations_used},
                        {"sigma_reached", p.sigma_reached}});
  }
  io::write_text(dir / "pool.json", manifest.dump(2));
}

UAPPool UAPPool::load(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text(dir / "pool.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, (dir / "pool.json").string() + ": " + e.what());
  }
  UAPPool pool;
  try {
    for (const auto& entry : manifest) {
      Perturbation p = read_perturbation(dir / entry.at("file").get<std::string>());
      if (p.stage_id != entry.at("stage_id").get<int>())
        fail(ErrorKind::kCorruptFile, "pool manifest stage id disagrees with file header");
      p.sigma_reached = entry.value("sigma_reached", true);
      pool.append(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptFile, (dir / "pool.json").string() + ": " + e.what());
  }
  return pool;
}

}  // namespace hdp::uap
