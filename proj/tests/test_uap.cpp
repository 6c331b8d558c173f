#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "hdp/binary_io.hpp"
#include "hdp/error.hpp"
#include "hdp/random.hpp"
#include "hdp/uap.hpp"
#include "test_util.hpp"

using namespace hdp;
using namespace hdp::uap;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kInvalidArgument;
}

const Shape kPair{1, 1, 2};

/// Logistic regression on two raw pixels: f(x) = sigmoid(w.x + b).
Model probe(float w0, float w1, float b) {
  Model m(make_linear_probe<float>(kPair), 0);
  m.set_head(std::vector<float>{w0, w1}, b);
  return m;
}

std::vector<Image> constant_images(int n, float a, float b) {
  std::vector<Image> v(n, Image(kPair));
  for (auto& img : v) img.pixels = {a, b};
  return v;
}

std::vector<const Image*> ptrs(const std::vector<Image>& v) {
  std::vector<const Image*> out;
  for (const auto& i : v) out.push_back(&i);
  return out;
}

Model small_convnet(std::uint64_t seed) {
  Model m(make_convnet<float>(ConvNetConfig{Shape{3, 8, 8}, {4, 6, 8}}), seed);
  Rng rng(seed + 7);
  std::vector<float> w(m.feature_dim());
  for (auto& v : w) v = static_cast<float>(rng.normal());
  m.set_head(w, -0.5f);
  return m;
}

std::vector<Image> random_images(int n, Shape s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image> v(n, Image(s));
  for (auto& img : v)
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return v;
}

double mean_log_prob(const Model& m, const std::vector<float>& batch) {
  const auto probs = m.forward_prob(batch);
  double s = 0;
  for (float p : probs) s += std::log(static_cast<double>(p));
  return s / static_cast<double>(probs.size());
}

}  // namespace

TEST_CASE("make_pseudo adds the perturbation and nothing else") {
  Perturbation p = Perturbation::zeros(kPair, 0.15f);
  const std::vector<float> x{0.3f, 0.7f, 0.1f, 0.9f};
  CHECK(make_pseudo(x, p) == x);

  p.delta = {0.15f, 0.15f};
  const std::vector<float> half(4, 0.5f);
  for (float v : make_pseudo(half, p)) CHECK(v == doctest::Approx(0.65f));

  Rng rng(1);
  std::vector<float> r(2 * 50);
  for (auto& v : r) v = static_cast<float>(rng.uniform());
  p.delta = {0.137f, -0.0421f};
  Perturbation neg = p;
  for (auto& v : neg.delta) v = -v;
  const auto back = make_pseudo(make_pseudo(r, p), neg);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(back[i] - r[i]) < 1e-7);

  // No clamping by default; the optional clamp keeps the range.
  const std::vector<float> edge{0.95f, 0.05f};
  p.delta = {0.15f, -0.15f};
  const auto raw = make_pseudo(edge, p);
  CHECK(raw[0] > 1.0f);
  CHECK(raw[1] < 0.0f);
  const auto clamped = make_pseudo(edge, p, true);
  CHECK(clamped[0] == 1.0f);
  CHECK(clamped[1] == 0.0f);

  CHECK(kind_of([&] { make_pseudo(std::vector<float>{1, 2, 3}, p); }) == ErrorKind::kShapeMismatch);
}

TEST_CASE("attack_rate on trivial models") {
  const auto reals = constant_images(10, 0.9f, 0.1f);
  const auto rp = ptrs(reals);
  const auto zero = Perturbation::zeros(kPair, 0.15f);
  CHECK(attack_rate(probe(1, -1, -2), rp, zero) == 0.0);

  Perturbation big = zero;
  big.delta = {-0.15f, 0.15f};
  CHECK(attack_rate(probe(0, 0, 10), rp, zero) == 1.0);
  CHECK(attack_rate(probe(0, 0, 10), rp, big) == 1.0);

  CHECK(kind_of([&] { attack_rate(probe(1, -1, 0), std::span<const Image* const>{}, zero); }) ==
        ErrorKind::kEmptyBatch);
}

TEST_CASE("attack_rate matches a brute-force count on the probe") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const float w0 = static_cast<float>(rng.normal()), w1 = static_cast<float>(rng.normal());
    const float b = static_cast<float>(rng.normal() * 0.3);
    const Model m = probe(w0, w1, b);
    std::vector<Image> reals(32, Image(kPair));
    for (auto& img : reals) img.pixels = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
    Perturbation p = Perturbation::zeros(kPair, 0.15f);
    p.delta = {0.15f, -0.15f};

    int fooled = 0;
    for (const auto& img : reals) {
      const double z = double(w0) * (img.pixels[0] + 0.15) + double(w1) * (img.pixels[1] - 0.15) + b;
      if (z >= 0) ++fooled;
    }
    CHECK(attack_rate(m, ptrs(reals), p) == static_cast<double>(fooled) / 32.0);
  }
}

TEST_CASE("uap_step with zero alpha is the identity") {
  const Model m = small_convnet(3);
  const auto imgs = random_images(5, Shape{3, 8, 8}, 4);
  Perturbation p = Perturbation::zeros(Shape{3, 8, 8}, 0.15f);
  Rng rng(5);
  for (auto& v : p.delta) v = static_cast<float>(rng.uniform(-0.15, 0.15));
  const auto ip = ptrs(imgs);
  const auto q = uap_step(p, stack_images(std::span<const Image* const>(ip)), m, 0.0, 0.15);
  CHECK(q.delta == p.delta);
}

TEST_CASE("uap_step follows the sign of the probe weights") {
  const Model m = probe(1, -1, -1.09f);
  const auto reals = constant_images(4, 0.9f, 0.1f);
  const auto ip = ptrs(reals);
  const auto batch = stack_images(std::span<const Image* const>(ip));
  const float alpha = 0.01f, eps = 0.15f;
  Perturbation p = Perturbation::zeros(kPair, eps);
  for (int k = 1; k <= 25; ++k) {
    p = uap_step(p, batch, m, alpha, eps);
    const double expect = std::min(k * 0.01, 0.15);
    CHECK(p.delta[0] == doctest::Approx(expect).epsilon(1e-5));
    CHECK(p.delta[1] == doctest::Approx(-expect).epsilon(1e-5));
    CHECK(p.max_abs() <= eps);
  }
  CHECK(p.delta[0] == eps);
  CHECK(p.delta[1] == -eps);

  // The literal printed sign walks the other way.
  Perturbation q = Perturbation::zeros(kPair, eps);
  q = uap_step(q, batch, m, alpha, eps, true);
  CHECK(q.delta[0] == -alpha);
  CHECK(q.delta[1] == alpha);
}

TEST_CASE("projection holds after any sequence of steps") {
  const Model m = small_convnet(6);
  const Shape s{3, 8, 8};
  const auto imgs = random_images(16, s, 7);
  const auto ip = ptrs(imgs);
  const auto batch = stack_images(std::span<const Image* const>(ip));
  Rng rng(8);
  for (double eps : {0.15, 0.01, 0.333}) {
    Perturbation p = Perturbation::zeros(s, static_cast<float>(eps));
    for (int k = 0; k < 40; ++k) {
      const double alpha = rng.uniform(0.0, eps);
      p = uap_step(p, batch, m, alpha, eps);
      CHECK(p.max_abs() <= static_cast<float>(eps));
    }
  }
}

TEST_CASE("one small step does not lower mean log f on most probes") {
  const Shape s{3, 8, 8};
  int ok = 0;
  const int probes = 200;
  for (int t = 0; t < probes; ++t) {
    const Model m = small_convnet(100 + t);
    const auto imgs = random_images(8, s, 1000 + t);
    const auto ip = ptrs(imgs);
    const auto batch = stack_images(std::span<const Image* const>(ip));
    Rng rng(5000 + t);
    Perturbation p = Perturbation::zeros(s, 0.15f);
    for (auto& v : p.delta) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    const auto q = uap_step(p, batch, m, 1e-4, 0.15);
    if (mean_log_prob(m, make_pseudo(batch, q)) >= mean_log_prob(m, make_pseudo(batch, p))) ++ok;
  }
  CHECK(ok >= 190);
}

TEST_CASE("generate_uap returns zero when the model already says fake") {
  const Model m = probe(0, 0, 10);
  const auto reals = constant_images(32, 0.9f, 0.1f);
  UAPConfig cfg;
  const auto p = generate_uap(m, ptrs(reals), cfg, 1);
  CHECK(p.iterations_used == 0);
  CHECK(p.achieved_attack_rate == 1.0f);
  CHECK(p.max_abs() == 0.0f);
  CHECK(p.sigma_reached);
}

TEST_CASE("generate_uap trajectory matches a step-by-step simulation on the probe") {
  // Bias chosen so x = [0.9, 0.1] is real (logit -0.29) and only the
  // epsilon corner flips it (logit +0.01).
  const float w0 = 1, w1 = -1, b = -1.09f;
  const Model m = probe(w0, w1, b);
  const auto reals = constant_images(32, 0.9f, 0.1f);
  UAPConfig cfg;
  cfg.epsilon = 0.15;
  cfg.alpha = 0.01;
  std::vector<std::vector<float>> seen;
  const auto p = generate_uap(m, ptrs(reals), cfg, 1,
                              [&](int, const Perturbation& cur) { seen.push_back(cur.delta); });

  // Independent simulation: one step per sweep (32 reals, batch 64), rate
  // checked after each sweep.
  std::vector<std::vector<float>> sim;
  std::array<float, 2> d{0, 0};
  const std::array<float, 2> sgn{1, -1};
  double rate = 0;
  while (static_cast<int>(sim.size()) < cfg.max_iters) {
    for (int j = 0; j < 2; ++j)
      d[j] = std::clamp(d[j] + 1.0f * 0.01f * sgn[j], -0.15f, 0.15f);
    sim.push_back({d[0], d[1]});
    const double z = double(w0) * (0.9f + d[0]) + double(w1) * (0.1f + d[1]) + b;
    rate = z >= 0 ? 1.0 : 0.0;
    if (rate >= cfg.sigma) break;
  }

  REQUIRE(seen.size() == sim.size());
  for (std::size_t k = 0; k < sim.size(); ++k) CHECK(seen[k] == sim[k]);
  CHECK(p.iterations_used == static_cast<int>(sim.size()));
  CHECK(p.iterations_used == 15);
  // Fifteen float additions of 0.01 land within rounding of the corner.
  CHECK(std::abs(p.delta[0] - 0.15f) < 1e-6f);
  CHECK(std::abs(p.delta[1] + 0.15f) < 1e-6f);
  CHECK(p.achieved_attack_rate == static_cast<float>(rate));
  CHECK(p.achieved_attack_rate == 1.0f);
  CHECK(p.sigma_reached);
}

TEST_CASE("generate_uap falls back to the best perturbation when sigma is out of reach") {
  const Model m = probe(1, -1, -1.09f);
  const auto reals = constant_images(32, 0.9f, 0.1f);
  UAPConfig cfg;
  cfg.epsilon = 0.05;  // corner logit stays negative
  cfg.alpha = 0.01;
  cfg.max_iters = 30;
  const auto p = generate_uap(m, ptrs(reals), cfg, 2);
  CHECK_FALSE(p.sigma_reached);
  CHECK(p.iterations_used == 30);
  CHECK(p.achieved_attack_rate == 0.0f);
  CHECK(p.max_abs() <= 0.05f);
  CHECK(p.stage_id == 2);
}

TEST_CASE("generate_uap on a conv net is deterministic and within budget") {
  const Shape s{3, 8, 8};
  const Model m = small_convnet(11);
  const auto imgs = random_images(150, s, 12);
  UAPConfig cfg;
  cfg.alpha = 0.002;
  cfg.max_iters = 60;
  cfg.gen_subset_size = 100;
  cfg.batch_size = 32;
  cfg.seed = 9;
  int calls = 0;
  const auto a = generate_uap(m, ptrs(imgs), cfg, 1, [&](int it, const Perturbation&) { CHECK(it == ++calls); });
  const auto b = generate_uap(m, ptrs(imgs), cfg, 1);
  CHECK(a.delta == b.delta);
  CHECK(a.iterations_used == b.iterations_used);
  CHECK(a.achieved_attack_rate == b.achieved_attack_rate);
  CHECK(a.max_abs() <= 0.15f);
  CHECK(calls >= a.iterations_used);
}

TEST_CASE("generate_uap input validation") {
  const Model m = probe(1, -1, 0);
  const auto reals = constant_images(4, 0.9f, 0.1f);
  UAPConfig cfg;
  CHECK(kind_of([&] { generate_uap(m, std::span<const Image* const>{}, cfg, 1); }) == ErrorKind::kEmptySubset);
  cfg.sigma = 1.5;
  CHECK(kind_of([&] { generate_uap(m, ptrs(reals), cfg, 1); }) == ErrorKind::kInvalidArgument);
  cfg.sigma = 0.8;
  cfg.epsilon = 0;
  CHECK(kind_of([&] { generate_uap(m, ptrs(reals), cfg, 1); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("perturbation file layout") {
  testutil::TempDir dir;
  Perturbation p = Perturbation::zeros(Shape{3, 4, 5}, 0.15f, 7);
  Rng rng(13);
  for (auto& v : p.delta) v = static_cast<float>(rng.uniform(-0.15, 0.15));
  p.achieved_attack_rate = 0.8125f;
  p.iterations_used = 321;
  const auto path = dir.path / "p.bin";
  write_perturbation(path, p);

  const auto bytes = testutil::read_bytes(path);
  REQUIRE(bytes.size() == kUapHeaderBytes + 4 * p.shape.size());
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "HDPU");
  auto u32 = [&](std::size_t off) {
    return std::uint32_t(std::uint8_t(bytes[off])) | std::uint32_t(std::uint8_t(bytes[off + 1])) << 8 |
           std::uint32_t(std::uint8_t(bytes[off + 2])) << 16 | std::uint32_t(std::uint8_t(bytes[off + 3])) << 24;
  };
  auto f32 = [&](std::size_t off) {
    const std::uint32_t bits = u32(off);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  };
  CHECK(u32(4) == kUapVersion);
  CHECK(u32(8) == 3);
  CHECK(u32(12) == 4);
  CHECK(u32(16) == 5);
  CHECK(f32(20) == 0.15f);
  CHECK(f32(24) == 0.8125f);
  CHECK(u32(28) == 7);
  CHECK(u32(32) == 321);
  for (std::size_t i = 0; i < p.delta.size(); ++i) CHECK(f32(kUapHeaderBytes + 4 * i) == p.delta[i]);

  const auto q = read_perturbation(path);
  CHECK(q.delta == p.delta);
  CHECK(q.shape == p.shape);
  CHECK(q.stage_id == 7);
  CHECK(q.iterations_used == 321);
  CHECK(q.achieved_attack_rate == 0.8125f);
}

TEST_CASE("perturbation file guards") {
  testutil::TempDir dir;
  const auto p = Perturbation::zeros(kPair, 0.15f, 1);
  const auto path = dir.path / "p.bin";
  write_perturbation(path, p);
  const auto good = testutil::read_bytes(path);

  auto bad = good;
  bad[0] = 'X';
  testutil::write_bytes(path, bad);
  CHECK(kind_of([&] { read_perturbation(path); }) == ErrorKind::kCorruptFile);

  bad = good;
  bad[4] = 9;
  testutil::write_bytes(path, bad);
  CHECK(kind_of([&] { read_perturbation(path); }) == ErrorKind::kVersionMismatch);

  bad = good;
  bad.pop_back();
  testutil::write_bytes(path, bad);
  CHECK(kind_of([&] { read_perturbation(path); }) == ErrorKind::kCorruptFile);
}

TEST_CASE("storage per perturbation does not depend on the data") {
  testutil::TempDir dir;
  const Model m = probe(1, -1, -1.09f);
  UAPConfig cfg;
  cfg.alpha = 0.01;
  for (int n : {4, 400}) {
    const auto reals = constant_images(n, 0.9f, 0.1f);
    const auto p = generate_uap(m, ptrs(reals), cfg, 1);
    const auto path = dir.path / ("n" + std::to_string(n) + ".bin");
    write_perturbation(path, p);
    CHECK(std::filesystem::file_size(path) == kUapHeaderBytes + 4 * kPair.size());
  }
}

TEST_CASE("pool ordering and persistence") {
  UAPPool pool;
  Rng rng(14);
  for (int s = 1; s <= 3; ++s) {
    auto p = Perturbation::zeros(Shape{3, 2, 2}, 0.15f, s);
    for (auto& v : p.delta) v = static_cast<float>(rng.uniform(-0.15, 0.15));
    p.achieved_attack_rate = 0.8f + 0.01f * s;
    pool.append(p);
    CHECK(pool.size() == static_cast<std::size_t>(s));
  }
  CHECK(kind_of([&] { pool.append(Perturbation::zeros(Shape{3, 2, 2}, 0.15f, 3)); }) == ErrorKind::kDuplicateStage);
  CHECK(kind_of([&] { pool.append(Perturbation::zeros(Shape{3, 2, 2}, 0.15f, 5)); }) ==
        ErrorKind::kInvalidArgument);
  CHECK(kind_of([&] { pool.append(Perturbation::zeros(Shape{1, 2, 2}, 0.15f, 4)); }) == ErrorKind::kShapeMismatch);

  testutil::TempDir dir;
  pool.save(dir.path);
  CHECK(std::filesystem::exists(dir.path / "uap_stage_01.bin"));
  const auto manifest = nlohmann::json::parse(io::read_text(dir.path / "pool.json"));
  REQUIRE(manifest.size() == 3);
  CHECK(manifest[2]["stage_id"] == 3);
  CHECK(manifest[2]["file"] == "uap_stage_03.bin");
  CHECK(manifest[0]["epsilon"].get<float>() == 0.15f);

  const auto back = UAPPool::load(dir.path);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.at(i).delta == pool.at(i).delta);
    CHECK(back.at(i).stage_id == pool.at(i).stage_id);
    CHECK(back.at(i).achieved_attack_rate == pool.at(i).achieved_attack_rate);
  }

  io::write_text(dir.path / "pool.json", "{not json");
  CHECK(kind_of([&] { UAPPool::load(dir.path); }) == ErrorKind::kCorruptFile);
}
