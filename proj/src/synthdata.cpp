#include "hdp/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>
#include <numbers>

#include <Eigen/Dense>
#include <json.hpp>

#include "hdp/binary_io.hpp"
#include "hdp/error.hpp"
#include "hdp/random.hpp"

namespace hdp {

std::string Shape::str() const {
  return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

}  // namespace hdp

namespace hdp::synth {
namespace {

using Eigen::MatrixXd;

/// Real symmetric circulant matrix projecting a length-n signal onto the
/// DFT bins with |k| <= hi * n/2, minus those with |k| <= lo * n/2 (lo < 0
/// keeps DC). Returns the projector and the number of bins kept.
std::pair<MatrixXd, int> band_projector(int n, double lo, double hi) {
  std::vector<int> kept;
  for (int k = 0; k < n; ++k) {
    const int signed_k = k <= n / 2 ? k : k - n;
    const double frac = std::abs(signed_k) / (n / 2.0);
    if (frac <= hi + 1e-12 && (lo < 0 || frac > lo + 1e-12)) kept.push_back(k);
  }
  MatrixXd proj = MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int k : kept) acc += std::cos(2.0 * std::numbers::pi * k * (i - j) / n);
      proj(i, j) = acc / n;
    }
  }
  return {proj, static_cast<int>(kept.size())};
}

const std::pair<MatrixXd, int>& cached_projector(int n, double lo, double hi) {
  static std::mutex mu;
  static std::map<std::tuple<int, double, double>, std::pair<MatrixXd, int>> cache;
  std::lock_guard lock(mu);
  auto key = std::make_tuple(n, lo, hi);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, band_projector(n, lo, hi)).first;
  return it->second;
}

/// White noise filtered to a frequency band, normalized to unit per-pixel
/// variance in expectation.
MatrixXd band_noise(Rng& rng, int h, int w, double lo, double hi) {
  MatrixXd white(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) white(y, x) = rng.normal();
  const auto& [ph, kh] = cached_projector(h, lo, hi);
  const auto& [pw, kw] = cached_projector(w, lo, hi);
  if (kh == 0 || kw == 0) return MatrixXd::Zero(h, w);
  MatrixXd out = ph * white * pw.transpose();
  const double scale = std::sqrt(static_cast<double>(h) * w / (static_cast<double>(kh) * kw));
  return out * scale;
}

std::vector<std::array<double, 3>> domain_palette(const DomainParams& domain) {
  Rng rng(hash_seed({domain.palette_seed, 0x9a1e77eULL}));
  std::vector<std::array<double, 3>> palette(4);
  for (auto& color : palette)
    for (double& ch : color) ch = rng.uniform(0.25, 1.0);
  return palette;
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

std::vector<std::uint8_t> region_mask(const Region& r, Shape s) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(s.height) * s.width, 0);
  if (r.radius_y <= 0 || r.radius_x <= 0) return mask;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const double dy = ((y + 0.5) / s.height - r.center_y) / r.radius_y;
      const double dx = ((x + 0.5) / s.width - r.center_x) / r.radius_x;
      if (dy * dy + dx * dx <= 1.0) mask[static_cast<std::size_t>(y) * s.width + x] = 1;
    }
  }
  return mask;
}

}  // namespace

void DomainParams::validate() const {
  require(blob_count >= 1, ErrorKind::kInvalidArgument, "blob_count must be >= 1");
  require(blob_scale > 0, ErrorKind::kInvalidArgument, "blob_scale must be positive");
  require(noise_cutoff > 0 && noise_cutoff <= 1, ErrorKind::kInvalidArgument, "noise_cutoff must be in (0,1]");
  require(noise_amp >= 0 && noise_amp <= 0.5, ErrorKind::kInvalidArgument, "noise_amp must be in [0,0.5]");
}

void ManipulationSpec::validate() const {
  require(strength >= 0 && strength <= 1, ErrorKind::kInvalidArgument, "strength must be in [0,1]");
}

void ProtocolSpec::validate() const {
  require(stages.size() >= 2, ErrorKind::kInvalidArgument, "a protocol needs at least 2 stages");
  require(shape.channels == 3 && shape.height >= 4 && shape.width >= 4, ErrorKind::kInvalidArgument,
          "protocol images must be 3-channel and at least 4x4");
  for (const auto& st : stages) {
    st.domain.validate();
    st.manipulation.validate();
    require(st.sizes.train_per_class >= 8 && st.sizes.test_per_class >= 8, ErrorKind::kInvalidArgument,
            "each stage needs at least 8 train and 8 test samples per class");
  }
}

std::string to_string(ManipulationKind kind) {
  switch (kind) {
    case ManipulationKind::kBlend: return "BLEND";
    case ManipulationKind::kNoisePatch: return "NOISE_PATCH";
    case ManipulationKind::kPatchShuffle: return "PATCH_SHUFFLE";
    case ManipulationKind::kSmooth: return "SMOOTH";
    case ManipulationKind::kSharpen: return "SHARPEN";
    case ManipulationKind::kColorShift: return "COLOR_SHIFT";
  }
  return "?";
}

ManipulationKind parse_manipulation_kind(const std::string& name) {
  for (auto k : {ManipulationKind::kBlend, ManipulationKind::kNoisePatch, ManipulationKind::kPatchShuffle,
                 ManipulationKind::kSmooth, ManipulationKind::kSharpen, ManipulationKind::kColorShift}) {
    if (to_string(k) == name) return k;
  }
  fail(ErrorKind::kInvalidArgument, "unknown manipulation kind '" + name + "'");
}

std::vector<Blob> real_image_blobs(const DomainParams& domain, Shape shape, std::uint64_t sample_seed) {
  domain.validate();
  const auto palette = domain_palette(domain);
  Rng rng(hash_seed({sample_seed, 0xb10bULL}));
  const double base_sigma = domain.blob_scale * std::min(shape.height, shape.width);
  std::vector<Blob> blobs(static_cast<std::size_t>(domain.blob_count));
  for (auto& b : blobs) {
    b.center_y = rng.uniform(0.0, shape.height - 1.0);
    b.center_x = rng.uniform(0.0, shape.width - 1.0);
    b.sigma = base_sigma * rng.uniform(0.7, 1.3);
    const auto& base = palette[rng.below(palette.size())];
    for (int c = 0; c < 3; ++c) b.color[c] = std::clamp(base[c] * (1.0 + 0.03 * rng.normal()), 0.0, 1.0);
  }
  return blobs;
}

Image gen_real_image(const DomainParams& domain, std::uint64_t sample_seed, Shape shape) {
  const auto blobs = real_image_blobs(domain, shape, sample_seed);
  std::vector<double> acc(shape.size(), 0.0);
  const std::size_t plane = static_cast<std::size_t>(shape.height) * shape.width;
  for (const auto& b : blobs) {
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const double dy = y - b.center_y;
        const double dx = x - b.center_x;
        const double g = std::exp(-(dy * dy + dx * dx) * inv);
        for (int c = 0; c < shape.channels; ++c)
          acc[c * plane + static_cast<std::size_t>(y) * shape.width + x] += b.color[c % 3] * g;
      }
    }
  }
  if (domain.noise_amp > 0) {
    Rng rng(hash_seed({sample_seed, 0x401eULL}));
    for (int c = 0; c < shape.channels; ++c) {
      const MatrixXd noise = band_noise(rng, shape.height, shape.width, -1.0, domain.noise_cutoff);
      for (int y = 0; y < shape.height; ++y)
        for (int x = 0; x < shape.width; ++x)
          acc[c * plane + static_cast<std::size_t>(y) * shape.width + x] += domain.noise_amp * noise(y, x);
    }
  }
  Image img(shape);
  for (std::size_t i = 0; i < acc.size(); ++i) img.pixels[i] = clamp01(acc[i]);
  return img;
}

Image box_blur3(const Image& img) {
  const Shape s = img.shape;
  Image out(s);
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        double acc = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = std::clamp(y + dy, 0, s.height - 1);
            const int xx = std::clamp(x + dx, 0, s.width - 1);
            acc += img.at(c, yy, xx);
          }
        }
        out.at(c, y, x) = static_cast<float>(acc / 9.0);
      }
    }
  }
  return out;
}

double high_frequency_energy(const Image& img) {
  const Image blur = box_blur3(img);
  double acc = 0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double d = static_cast<double>(img.pixels[i]) - blur.pixels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(img.pixels.size());
}

Image apply_manipulation(const Image& img, const ManipulationSpec& spec, const Image* donor) {
  spec.validate();
  if (spec.kind == ManipulationKind::kBlend) {
    require(donor != nullptr, ErrorKind::kMissingDonor, "BLEND requires a donor image");
    require(donor->shape == img.shape, ErrorKind::kShapeMismatch, "donor shape differs from image shape");
  }
  Image out = img;
  if (spec.strength == 0.0) return out;

  const Shape s = img.shape;
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  const auto mask = region_mask(spec.region, s);
  const double st = spec.strength;
  Rng rng(hash_seed({spec.seed, static_cast<std::uint64_t>(spec.kind)}));

  auto mix_into = [&](const Image& target) {
    for (int c = 0; c < s.channels; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        if (mask[p]) {
          const std::size_t i = c * plane + p;
          out.pixels[i] = clamp01(img.pixels[i] + st * (static_cast<double>(target.pixels[i]) - img.pixels[i]));
        }
  };

  switch (spec.kind) {
    case ManipulationKind::kBlend:
      mix_into(*donor);
      break;
    case ManipulationKind::kSmooth:
      mix_into(box_blur3(img));
      break;
    case ManipulationKind::kSharpen: {
      const Image blur = box_blur3(img);
      for (int c = 0; c < s.channels; ++c)
        for (std::size_t p = 0; p < plane; ++p)
          if (mask[p]) {
            const std::size_t i = c * plane + p;
            out.pixels[i] = clamp01(img.pixels[i] + st * (static_cast<double>(img.pixels[i]) - blur.pixels[i]));
          }
      break;
    }
    case ManipulationKind::kNoisePatch: {
      for (int c = 0; c < s.channels; ++c) {
        const MatrixXd noise = band_noise(rng, s.height, s.width, 0.25, 0.75);
        for (int y = 0; y < s.height; ++y)
          for (int x = 0; x < s.width; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * s.width + x;
            if (mask[p]) out.pixels[c * plane + p] = clamp01(img.pixels[c * plane + p] + 0.15 * st * noise(y, x));
          }
      }
      break;
    }
    case ManipulationKind::kColorShift: {
      // Fixed warm cast: red and blue up, green down.
      constexpr std::array<double, 3> signs{1.0, -1.0, 1.0};
      for (int c = 0; c < s.channels; ++c) {
        const double gain = 1.0 + signs[c % 3] * 0.2 * st;
        for (std::size_t p = 0; p < plane; ++p)
          if (mask[p]) out.pixels[c * plane + p] = clamp01(img.pixels[c * plane + p] * gain);
      }
      break;
    }
    case ManipulationKind::kPatchShuffle: {
      constexpr int kPatch = 4;
      std::vector<std::pair<int, int>> cells;  // top-left corners of 4x4 cells centred in the region
      for (int py = 0; py + kPatch <= s.height; py += kPatch)
        for (int px = 0; px + kPatch <= s.width; px += kPatch) {
          const int cy = py + kPatch / 2;
          const int cx = px + kPatch / 2;
          if (mask[static_cast<std::size_t>(cy) * s.width + cx]) cells.emplace_back(py, px);
        }
      if (cells.size() < 2) break;
      std::vector<std::size_t> perm(cells.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
      rng.shuffle(perm);
      bool identity = true;
      for (std::size_t i = 0; i < perm.size(); ++i) identity = identity && perm[i] == i;
      if (identity) std::rotate(perm.begin(), perm.begin() + 1, perm.end());
      Image shuffled = img;
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto [dy, dx] = cells[i];
        const auto [sy, sx] = cells[perm[i]];
        for (int c = 0; c < s.channels; ++c)
          for (int y = 0; y < kPatch; ++y)
            for (int x = 0; x < kPatch; ++x) shuffled.at(c, dy + y, dx + x) = img.at(c, sy + y, sx + x);
      }
      for (const auto& [py, px] : cells)
        for (int c = 0; c < s.channels; ++c)
          for (int y = 0; y < kPatch; ++y)
            for (int x = 0; x < kPatch; ++x) {
              const double a = img.at(c, py + y, px + x);
              out.at(c, py + y, px + x) = clamp01(a + st * (shuffled.at(c, py + y, px + x) - a));
            }
      break;
    }
  }
  return out;
}

std::uint64_t sample_seed(std::uint64_t global_seed, int stage_id, SeedStream stream, std::uint64_t index) {
  return hash_seed({global_seed, static_cast<std::uint64_t>(stage_id), static_cast<std::uint64_t>(stream), index});
}

namespace {

Sample make_real(const StageSpec& spec, int stage_id, std::uint64_t global_seed, Shape shape, std::uint64_t index) {
  Sample s;
  s.seed = sample_seed(global_seed, stage_id, SeedStream::kReal, index);
  s.image = gen_real_image(spec.domain, s.seed, shape);
  s.label = 0;
  s.stage_id = stage_id;
  return s;
}

Sample make_fake(const StageSpec& spec, int stage_id, std::uint64_t global_seed, Shape shape, std::uint64_t index) {
  Sample s;
  s.seed = sample_seed(global_seed, stage_id, SeedStream::kFakeSource, index);
  const Image source = gen_real_image(spec.domain, s.seed, shape);

  // Per-sample jitter of the manipulated region around the stage template.
  const std::uint64_t mseed = sample_seed(global_seed, stage_id, SeedStream::kManipulation, index);
  Rng rng(mseed);
  ManipulationSpec m = spec.manipulation;
  m.seed = mseed;
  m.region.center_y = std::clamp(m.region.center_y + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  m.region.center_x = std::clamp(m.region.center_x + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  m.region.radius_y *= rng.uniform(0.85, 1.15);
  m.region.radius_x *= rng.uniform(0.85, 1.15);

  if (m.kind == ManipulationKind::kBlend) {
    const Image donor =
        gen_real_image(spec.domain, sample_seed(global_seed, stage_id, SeedStream::kDonor, index), shape);
    s.image = apply_manipulation(source, m, &donor);
  } else {
    s.image = apply_manipulation(source, m);
  }
  s.label = 1;
  s.stage_id = stage_id;
  s.manipulation = m;
  return s;
}

}  // namespace

StageDataset build_stage(const StageSpec& spec, int stage_id, std::uint64_t global_seed, Shape shape) {
  spec.domain.validate();
  spec.manipulation.validate();
  require(spec.sizes.train_per_class >= 8 && spec.sizes.test_per_class >= 8, ErrorKind::kInvalidArgument,
          "each stage needs at least 8 train and 8 test samples per class");
  StageDataset ds;
  ds.stage_id = stage_id;
  const auto n_train = static_cast<std::uint64_t>(spec.sizes.train_per_class);
  const auto n_test = static_cast<std::uint64_t>(spec.sizes.test_per_class);
  for (std::uint64_t i = 0; i < n_train; ++i) {
    ds.train_real.push_back(make_real(spec, stage_id, global_seed, shape, i));
    ds.train_fake.push_back(make_fake(spec, stage_id, global_seed, shape, i));
  }
  for (std::uint64_t i = n_train; i < n_train + n_test; ++i) {
    ds.test_real.push_back(make_real(spec, stage_id, global_seed, shape, i));
    ds.test_fake.push_back(make_fake(spec, stage_id, global_seed, shape, i));
  }
  return ds;
}

std::vector<StageDataset> build_protocol(const ProtocolSpec& spec) {
  spec.validate();
  std::vector<StageDataset> out;
  out.reserve(spec.stages.size());
  for (std::size_t t = 0; t < spec.stages.size(); ++t)
    out.push_back(build_stage(spec.stages[t], static_cast<int>(t + 1), spec.global_seed, spec.shape));
  return out;
}

namespace {

StageSpec stage(DomainParams d, ManipulationKind kind, double strength, StageSizes sizes, double radius = 0.35) {
  StageSpec s;
  s.domain = d;
  s.manipulation.kind = kind;
  s.manipulation.strength = strength;
  s.manipulation.region.radius_y = radius;
  s.manipulation.region.radius_x = radius;
  s.sizes = sizes;
  return s;
}

DomainParams domain(int blobs, double scale, double cutoff, double amp, std::uint64_t palette) {
  return DomainParams{blobs, scale, cutoff, amp, palette};
}

}  // namespace

bool is_preset_name(const std::string& name) { return name == "p1" || name == "p2" || name == "p3"; }

ProtocolSpec preset(const std::string& name, std::uint64_t global_seed, StageSizes sizes) {
  using K = ManipulationKind;
  ProtocolSpec ps;
  ps.name = name;
  ps.global_seed = global_seed;
  if (name == "p1") {
    // One shared real domain, four manipulation types. Each stage is learnable
    // on its own and sequential fine-tuning forgets the first two.
    const DomainParams shared = domain(6, 0.12, 0.8, 0.1, 11);
    ps.stages = {stage(shared, K::kSmooth, 1.0, sizes, 0.45), stage(shared, K::kColorShift, 1.0, sizes, 0.7),
                 stage(shared, K::kNoisePatch, 1.0, sizes, 0.45), stage(shared, K::kSharpen, 1.0, sizes)};
  } else if (name == "p2") {
    // Distinct real domains per stage.
    ps.stages = {stage(domain(6, 0.12, 0.5, 0.05, 11), K::kSharpen, 1.0, sizes),
                 stage(domain(4, 0.16, 0.3, 0.08, 23), K::kBlend, 1.0, sizes),
                 stage(domain(8, 0.09, 0.8, 0.04, 37), K::kPatchShuffle, 1.0, sizes),
                 stage(domain(5, 0.14, 0.6, 0.06, 41), K::kColorShift, 1.0, sizes)};
  } else if (name == "p3") {
    const DomainParams a = domain(6, 0.12, 0.5, 0.05, 11);
    const DomainParams b = domain(4, 0.16, 0.3, 0.08, 23);
    const DomainParams c = domain(8, 0.09, 0.8, 0.04, 37);
    const DomainParams d = domain(5, 0.14, 0.6, 0.06, 41);
    ps.stages = {stage(a, K::kSharpen, 1.0, sizes),    stage(b, K::kBlend, 1.0, sizes),
                 stage(a, K::kColorShift, 1.0, sizes), stage(c, K::kPatchShuffle, 1.0, sizes),
                 stage(a, K::kSmooth, 1.0, sizes),     stage(d, K::kNoisePatch, 1.0, sizes),
                 stage(a, K::kNoisePatch, 1.0, sizes), stage(b, K::kSharpen, 1.0, sizes),
                 stage(c, K::kColorShift, 1.0, sizes), stage(d, K::kSmooth, 1.0, sizes)};
  } else {
    fail(ErrorKind::kInvalidArgument, "unknown preset '" + name + "'");
  }
  return ps;
}

namespace {

using nlohmann::json;

json to_json(const StageSpec& s) {
  const auto& d = s.domain;
  const auto& m = s.manipulation;
  return json{{"domain",
               {{"blob_count", d.blob_count},
                {"blob_scale", d.blob_scale},
                {"noise_cutoff", d.noise_cutoff},
                {"noise_amp", d.noise_amp},
                {"palette_seed", d.palette_seed}}},
              {"manipulation",
               {{"kind", to_string(m.kind)},
                {"strength", m.strength},
                {"region",
                 {{"center_y", m.region.center_y},
                  {"center_x", m.region.center_x},
                  {"radius_y", m.region.radius_y},
                  {"radius_x", m.region.radius_x}}},
                {"seed", m.seed}}},
              {"train_per_class", s.sizes.train_per_class},
              {"test_per_class", s.sizes.test_per_class}};
}

}  // namespace

std::string protocol_to_json(const ProtocolSpec& spec) {
  json stages = json::array();
  for (const auto& s : spec.stages) stages.push_back(to_json(s));
  json j{{"name", spec.name},
         {"global_seed", spec.global_seed},
         {"shape", {spec.shape.channels, spec.shape.height, spec.shape.width}},
         {"stages", stages}};
  return j.dump(2);
}

ProtocolSpec protocol_from_json(const std::string& text) {
  ProtocolSpec ps;
  try {
    const json j = json::parse(text);
    ps.name = j.value("name", std::string("custom"));
    ps.global_seed = j.value("global_seed", std::uint64_t{0});
    if (j.contains("shape")) {
      const auto& sh = j.at("shape");
      ps.shape = Shape{sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>()};
    }
    for (const auto& js : j.at("stages")) {
      StageSpec s;
      const auto& d = js.at("domain");
      s.domain.blob_count = d.value("blob_count", s.domain.blob_count);
      s.domain.blob_scale = d.value("blob_scale", s.domain.blob_scale);
      s.domain.noise_cutoff = d.value("noise_cutoff", s.domain.noise_cutoff);
      s.domain.noise_amp = d.value("noise_amp", s.domain.noise_amp);
      s.domain.palette_seed = d.value("palette_seed", s.domain.palette_seed);
      const auto& m = js.at("manipulation");
      s.manipulation.kind = parse_manipulation_kind(m.at("kind").get<std::string>());
      s.manipulation.strength = m.value("strength", s.manipulation.strength);
      s.manipulation.seed = m.value("seed", std::uint64_t{0});
      if (m.contains("region")) {
        const auto& r = m.at("region");
        s.manipulation.region.center_y = r.value("center_y", s.manipulation.region.center_y);
        s.manipulation.region.center_x = r.value("center_x", s.manipulation.region.center_x);
        s.manipulation.region.radius_y = r.value("radius_y", s.manipulation.region.radius_y);
        s.manipulation.region.radius_x = r.value("radius_x", s.manipulation.region.radius_x);
      }
      s.sizes.train_per_class = js.value("train_per_class", s.sizes.train_per_class);
      s.sizes.test_per_class = js.value("test_per_class", s.sizes.test_per_class);
      ps.stages.push_back(s);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kInvalidArgument, std::string("bad protocol JSON: ") + e.what());
  }
  ps.validate();
  return ps;
}

void write_image(const std::filesystem::path& path, const Image& img) {
  io::Writer w;
  w.bytes("HDPI");
  w.u32(static_cast<std::uint32_t>(img.shape.channels));
  w.u32(static_cast<std::uint32_t>(img.shape.height));
  w.u32(static_cast<std::uint32_t>(img.shape.width));
  w.f32s(img.pixels);
  w.save(path);
}

Image read_image(const std::filesystem::path& path) {
  auto r = io::Reader::from_file(path);
  if (r.bytes(4) != "HDPI") fail(ErrorKind::kCorruptFile, path.string() + ": bad magic");
  Shape s;
  s.channels = static_cast<int>(r.u32());
  s.height = static_cast<int>(r.u32());
  s.width = static_cast<int>(r.u32());
  Image img(s);
  img.pixels = r.f32s(s.size());
  if (r.remaining() != 0) fail(ErrorKind::kCorruptFile, path.string() + ": trailing bytes");
  return img;
}

void dump_stage(const StageDataset& stage, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json index = json::array();
  int counter = 0;
  auto emit = [&](const std::vector<Sample>& samples, const char* split) {
    for (const auto& s : samples) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06d.hdpi", counter++);
      write_image(dir / name, s.image);
      index.push_back(json{{"file", name},
                           {"split", split},
                           {"stage_id", s.stage_id},
                           {"label", s.label},
                           {"manipulation", s.manipulation ? json(to_string(s.manipulation->kind)) : json(nullptr)},
                           {"seed", s.seed}});
    }
  };
  emit(stage.train_real, "train");
  emit(stage.train_fake, "train");
  emit(stage.test_real, "test");
  emit(stage.test_fake, "test");
  io::write_text(dir / "index.json", index.dump(2));
}

}  // namespace hdp::synth
