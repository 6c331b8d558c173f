#include <doctest.h>

#include <cmath>
#include <set>

#include <json.hpp>

#include "hdp/binary_io.hpp"
#include "hdp/checkpoint.hpp"
#include "hdp/error.hpp"
#include "hdp/losses.hpp"
#include "hdp/random.hpp"
#include "hdp/trainer.hpp"
#include "test_util.hpp"

using namespace hdp;
using namespace hdp::train;

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

const Shape kSmall{3, 8, 8};

synth::StageDataset small_stage(int stage_id, synth::ManipulationKind kind, int train = 24, int test = 8) {
  synth::StageSpec spec;
  spec.manipulation.kind = kind;
  spec.sizes = {train, test};
  return synth::build_stage(spec, stage_id, 5, kSmall);
}

std::vector<synth::StageDataset> small_protocol() {
  return {small_stage(1, synth::ManipulationKind::kSmooth), small_stage(2, synth::ManipulationKind::kSharpen),
          small_stage(3, synth::ManipulationKind::kNoisePatch)};
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.widths = {4, 6, 8};
  cfg.epochs_per_stage = 2;
  cfg.batch_size = 16;
  cfg.uap.alpha = 0.01;
  cfg.uap.max_iters = 40;
  cfg.uap.gen_subset_size = 16;
  cfg.uap.batch_size = 8;
  return cfg;
}

uap::UAPPool random_pool(int n, std::uint64_t seed) {
  uap::UAPPool pool;
  Rng rng(seed);
  for (int s = 1; s <= n; ++s) {
    auto p = uap::Perturbation::zeros(kSmall, 0.15f, s);
    for (auto& v : p.delta) v = static_cast<float>(rng.uniform(-0.15, 0.15));
    pool.append(p);
  }
  return pool;
}

std::vector<float> snapshot(const Model& m) { return {m.params().begin(), m.params().end()}; }

}  // namespace

TEST_CASE("Adam matches a double-precision reference") {
  const std::size_t n = 7;
  Rng rng(1);
  std::vector<float> p(n);
  for (auto& v : p) v = static_cast<float>(rng.normal());
  std::vector<double> ref(p.begin(), p.end()), m(n, 0), v(n, 0);
  Adam opt(n, 1e-3, 1e-5);
  for (int t = 1; t <= 20; ++t) {
    std::vector<float> g(n);
    for (auto& x : g) x = static_cast<float>(rng.normal());
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i] + 1e-5 * static_cast<double>(p[i]);
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] = static_cast<float>(p[i] - 1e-3 * mh / (std::sqrt(vh) + 1e-8));
    }
    opt.step(p, g);
    for (std::size_t i = 0; i < n; ++i) CHECK(p[i] == static_cast<float>(ref[i]));
  }
  CHECK(opt.steps() == 20);
  std::vector<float> wrong(n + 1);
  CHECK(kind_of([&] { opt.step(wrong, wrong); }) == ErrorKind::kShapeMismatch);
}

TEST_CASE("component codes") {
  CHECK(Components{}.code() == "111");
  CHECK(Components::from_code("101").code() == "101");
  CHECK_FALSE(Components::from_code("000").any());
  const auto c = Components::from_code("010");
  CHECK_FALSE(c.entropy);
  CHECK(c.distill_pseudo);
  CHECK_FALSE(c.distill_real);
  for (const char* bad : {"11", "1111", "1a1", ""})
    CHECK(kind_of([&] { Components::from_code(bad); }) == ErrorKind::kInvalidArgument);
  CHECK(parse_method("joint") == Method::kJoint);
  CHECK(to_string(Method::kSft) == "sft");
  CHECK(kind_of([] { parse_method("lwf"); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.beta = -1;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::kInvalidArgument);
  cfg = {};
  cfg.uap.sigma = 0;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::kInvalidArgument);
  cfg = {};
  cfg.epochs_per_stage = 0;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::kInvalidArgument);
}

TEST_CASE("defaults") {
  const TrainConfig cfg;
  CHECK(cfg.lr == 1e-3);
  CHECK(cfg.weight_decay == 1e-5);
  CHECK(cfg.batch_size == 64);
  CHECK(cfg.epochs_per_stage == 10);
  CHECK(cfg.beta == 1.0);
  CHECK(cfg.buffer_per_stage == 0);
  CHECK(cfg.uap.epsilon == 0.15);
  CHECK(cfg.uap.alpha == 1e-4);
  CHECK(cfg.uap.sigma == 0.8);
  CHECK(cfg.uap.max_iters == 5000);
  CHECK(cfg.uap.gen_subset_size == 1000);
  CHECK(cfg.uap.batch_size == 64);
}

TEST_CASE("select_buffer") {
  const auto st = small_stage(1, synth::ManipulationKind::kSmooth, 40);
  CHECK(select_buffer(st, 0, 1).empty());
  const auto b = select_buffer(st, 30, 1);
  int reals = 0;
  for (const auto& it : b) {
    reals += it.label == 0;
    CHECK(it.buffered);
  }
  CHECK(b.size() == 30);
  CHECK(reals == 15);
  const auto odd = select_buffer(st, 7, 1);
  int odd_reals = 0;
  for (const auto& it : odd) odd_reals += it.label == 0;
  CHECK(odd_reals == 4);

  const auto again = select_buffer(st, 30, 1);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(b[i].image == again[i].image);
  std::set<const Image*> unique;
  for (const auto& it : b) unique.insert(it.image);
  CHECK(unique.size() == b.size());

  CHECK(kind_of([&] { select_buffer(st, 81, 1); }) == ErrorKind::kKTooLarge);
  CHECK(kind_of([&] { select_buffer(st, -1, 1); }) == ErrorKind::kInvalidArgument);

  const auto big = small_stage(1, synth::ManipulationKind::kSmooth, 30);
  const auto fifty = select_buffer(big, 50, 3);
  int r50 = 0;
  for (const auto& it : fifty) r50 += it.label == 0;
  CHECK(r50 == 25);
  CHECK(fifty.size() == 50);
}

TEST_CASE("preserve training with everything switched off reduces to cross entropy") {
  const auto s1 = small_stage(1, synth::ManipulationKind::kSmooth, 80);
  const auto s2 = small_stage(2, synth::ManipulationKind::kSharpen, 80);
  TrainConfig cfg = small_config();
  cfg.epochs_per_stage = 1;  // 160 items / 16 = 10 batches
  Model base = make_model(cfg, kSmall);
  train_stage_base(base, s1, cfg);
  const Model teacher = base.clone_frozen();
  const uap::UAPPool empty;

  for (const char* code : {"000", "001"}) {
    TrainConfig hcfg = cfg;
    hcfg.components = Components::from_code(code);
    hcfg.beta = 0.0;
    Model sft = base;
    Model hdp = base;
    std::vector<loss::LossBreakdown> a, b;
    train_stage_base(sft, s2, cfg, {}, [&](const BatchRecord& r) { a.push_back(r.loss); });
    train_stage_hdp(hdp, teacher, s2, empty, hcfg, {}, [&](const BatchRecord& r) { b.push_back(r.loss); });
    REQUIRE(a.size() == 10);
    REQUIRE(b.size() == 10);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::abs(a[i].total - b[i].total) <= 1e-12);
      CHECK(std::abs(a[i].ce - b[i].ce) <= 1e-12);
    }
    CHECK(snapshot(sft) == snapshot(hdp));
  }
}

TEST_CASE("an empty pool is an error only when a pool term is on") {
  const auto s1 = small_stage(1, synth::ManipulationKind::kSmooth);
  TrainConfig cfg = small_config();
  Model m = make_model(cfg, kSmall);
  const Model teacher = m.clone_frozen();
  const uap::UAPPool empty;
  for (const char* code : {"100", "010", "111"}) {
    cfg.components = Components::from_code(code);
    CHECK(kind_of([&] { train_stage_hdp(m, teacher, s1, empty, cfg); }) == ErrorKind::kEmptyPool);
  }
  cfg.components = Components::from_code("001");
  CHECK_NOTHROW(train_stage_hdp(m, teacher, s1, empty, cfg));
}

TEST_CASE("recorded batches recompose to the logged total") {
  const auto s1 = small_stage(1, synth::ManipulationKind::kSmooth);
  const auto s2 = small_stage(2, synth::ManipulationKind::kNoisePatch);
  TrainConfig cfg = small_config();
  cfg.beta = 0.7;
  Model m = make_model(cfg, kSmall);
  train_stage_base(m, s1, cfg);
  const Model teacher = m.clone_frozen();
  const auto teacher_before = snapshot(teacher);
  const auto pool = random_pool(3, 2);

  const auto buffer = select_buffer(s1, 6, 0);
  int seen = 0;
  train_stage_hdp(m, teacher, s2, pool, cfg, buffer, [&](const BatchRecord& r) {
    const int d = r.feature_dim;
    CHECK(r.batch_index == seen++);
    if (r.real_images.empty()) {
      // No stage reals in this batch: cross entropy only.
      CHECK(r.uap_index == -1);
      CHECK(r.loss.total == r.loss.ce);
      return;
    }
    // Round-robin over the pool by batch index.
    CHECK(r.uap_index == static_cast<int>(r.batch_index % 3));

    // The pseudo batch is the non-buffered real half plus the chosen delta.
    const auto& delta = pool.at(static_cast<std::size_t>(r.uap_index)).delta;
    REQUIRE(r.pseudo_images.size() == r.real_images.size());
    for (std::size_t i = 0; i < r.real_images.size(); ++i)
      CHECK(r.pseudo_images[i] == r.real_images[i] + delta[i % delta.size()]);
    const std::size_t n_real = r.real_images.size() / kSmall.size();
    CHECK(r.pseudo_probs.size() == n_real);
    CHECK(r.student_real_features.size() == n_real * d);
    long reals_in_batch = 0;
    for (int y : r.labels) reals_in_batch += y == 0;
    CHECK(static_cast<long>(n_real) <= reals_in_batch);

    const double ce = loss::bce<float>(r.probs, r.labels);
    const double e = loss::pseudo_entropy<float>(r.pseudo_probs);
    const double lr = loss::feat_mse<float>(r.student_real_features, r.teacher_real_features, d);
    const double lp = loss::feat_mse<float>(r.student_pseudo_features, r.teacher_pseudo_features, d);
    const double total = ce + e + 0.7 * (lr + lp);
    CHECK(testutil::rel_err(total, r.loss.total) < 1e-6);
    CHECK(testutil::rel_err(ce, r.loss.ce) < 1e-6);

    // The student before its first update is the teacher.
    if (r.batch_index == 0) {
      CHECK(r.loss.distill_real == 0.0);
      CHECK(r.loss.distill_pseudo == 0.0);
    }
  });
  // (48 stage items + 6 buffered) / 16 per batch, two epochs.
  CHECK(seen == 2 * 4);
  CHECK(snapshot(teacher) == teacher_before);
}

TEST_CASE("buffered reals never enter the pseudo batch") {
  const auto s1 = small_stage(1, synth::ManipulationKind::kSmooth);
  const auto s2 = small_stage(2, synth::ManipulationKind::kNoisePatch);
  TrainConfig cfg = small_config();
  Model m = make_model(cfg, kSmall);
  const Model teacher = m.clone_frozen();
  const auto pool = random_pool(1, 3);
  const auto buffer = select_buffer(s1, 10, 0);
  std::set<std::vector<float>> buffered;
  for (const auto& it : buffer) buffered.insert(it.image->pixels);
  train_stage_hdp(m, teacher, s2, pool, cfg, buffer, [&](const BatchRecord& r) {
    const std::size_t per = kSmall.size();
    for (std::size_t i = 0; i * per < r.real_images.size(); ++i) {
      const std::vector<float> img(r.real_images.begin() + i * per, r.real_images.begin() + (i + 1) * per);
      CHECK(buffered.count(img) == 0);
    }
  });
}

TEST_CASE("stage loss decreases over the epochs") {
  const auto st = small_stage(1, synth::ManipulationKind::kSmooth, 64);
  TrainConfig cfg = small_config();
  cfg.epochs_per_stage = 6;
  Model m = make_model(cfg, kSmall);
  const auto losses = train_stage_base(m, st, cfg);
  REQUIRE(losses.epoch_mean_total.size() == 6);
  CHECK(losses.epoch_mean_total.back() <= losses.epoch_mean_total.front());
  CHECK(losses.batches == 6 * 8);
}

TEST_CASE("hdp run follows the stage loop") {
  const auto protocol = small_protocol();
  const TrainConfig cfg = small_config();
  testutil::TempDir dir;
  RunOptions opts;
  opts.out_dir = dir.path;
  std::vector<int> uap_stage_reads;
  opts.on_batch = [&](const BatchRecord& r) {
    if (r.stage_id == 2) uap_stage_reads.push_back(r.uap_index);
  };
  const auto r = run_protocol_hdp(protocol, cfg, opts);
  CHECK(r.pool.size() == 3);
  CHECK(r.stages.size() == 3);
  for (int t = 1; t <= 3; ++t) {
    CHECK(r.pool.at(t - 1).stage_id == t);
    CHECK(r.pool.at(t - 1).max_abs() <= 0.15f);
    CHECK(r.acc.row_complete(t));
    CHECK(r.stages[t - 1].uap.has_value());
  }
  for (int idx : uap_stage_reads) CHECK(idx == 0);
  CHECK_FALSE(uap_stage_reads.empty());

  CHECK(std::filesystem::exists(dir.path / "checkpoints" / "stage_03.hdpm"));
  CHECK(std::filesystem::exists(dir.path / "uap" / "uap_stage_03.bin"));
  CHECK(uap::UAPPool::load(dir.path / "uap").size() == 3);
  const auto j = nlohmann::json::parse(io::read_text(dir.path / "stages" / "stage_02.json"));
  CHECK(j["stage_id"] == 2);
  CHECK(j.contains("mean_losses"));
  CHECK(j.contains("wall_seconds"));
  CHECK(j["checkpoint"] == "checkpoints/stage_02.hdpm");

  // The last checkpoint is the returned model.
  const auto loaded = load_checkpoint(dir.path / "checkpoints" / "stage_03.hdpm");
  CHECK(snapshot(loaded) == snapshot(r.model));

  const auto again = run_protocol_hdp(protocol, cfg);
  CHECK(again.acc == r.acc);
  CHECK(again.auc == r.auc);
  CHECK(snapshot(again.model) == snapshot(r.model));
}

TEST_CASE("sft and joint baselines") {
  const auto protocol = small_protocol();
  TrainConfig cfg = small_config();
  const auto sft = run_protocol_sft(protocol, cfg);
  CHECK(sft.pool.empty());
  CHECK(sft.stages.size() == 3);
  for (int t = 1; t <= 3; ++t) CHECK(sft.acc.row_complete(t));
  const auto sft2 = run_protocol_sft(protocol, cfg);
  CHECK(sft2.acc == sft.acc);

  long batches = 0;
  RunOptions opts;
  opts.on_batch = [&](const BatchRecord&) { ++batches; };
  const auto joint = run_protocol_joint(protocol, cfg, opts);
  CHECK(joint.stages.size() == 1);
  CHECK(joint.acc.row_complete(3));
  CHECK_FALSE(joint.acc.row_complete(1));
  CHECK_FALSE(joint.acc.get(2, 1).has_value());
  // Union of 3 x 48 training items, 16 per batch, two epochs.
  CHECK(batches == 2 * 9);
  CHECK(joint.stages[0].losses.batches == batches);
  const auto joint2 = run_protocol_joint(protocol, cfg);
  CHECK(joint2.acc == joint.acc);

  cfg.method = Method::kSft;
  CHECK(run_protocol(protocol, cfg).acc == sft.acc);
}

TEST_CASE("protocol preconditions") {
  const auto protocol = small_protocol();
  const TrainConfig cfg = small_config();
  const std::vector<synth::StageDataset> one(protocol.begin(), protocol.begin() + 1);
  CHECK(kind_of([&] { run_protocol_hdp(one, cfg); }) == ErrorKind::kInvalidArgument);
  synth::StageDataset empty;
  empty.stage_id = 2;
  CHECK(kind_of([&] { run_protocol_sft({protocol[0], empty}, cfg); }) == ErrorKind::kEmptyStage);
}
