#include "hdp/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "hdp/binary_io.hpp"
#include "hdp/checkpoint.hpp"
#include "hdp/error.hpp"
#include "hdp/random.hpp"

namespace hdp::train {

std::string to_string(Method m) {
  switch (m) {
    case Method::kHdp: return "hdp";
    case Method::kSft: return "sft";
    case Method::kJoint: return "joint";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "hdp") return Method::kHdp;
  if (name == "sft") return Method::kSft;
  if (name == "joint") return Method::kJoint;
  fail(ErrorKind::kInvalidArgument, "unknown method '" + name + "'");
}

std::string Components::code() const {
  return std::string{entropy ? '1' : '0', distill_pseudo ? '1' : '0', distill_real ? '1' : '0'};
}

Components Components::from_code(const std::string& code) {
  require(code.size() == 3 && code.find_first_not_of("01") == std::string::npos, ErrorKind::kInvalidArgument,
          "component code must be three 0/1 flags (E, L_p, L_r), got '" + code + "'");
  return Components{code[0] == '1', code[1] == '1', code[2] == '1'};
}

void TrainConfig::validate() const {
  require(lr > 0, ErrorKind::kInvalidArgument, "lr must be positive");
  require(weight_decay >= 0, ErrorKind::kInvalidArgument, "weight_decay must be non-negative");
  require(batch_size > 0, ErrorKind::kInvalidArgument, "batch_size must be positive");
  require(epochs_per_stage > 0, ErrorKind::kInvalidArgument, "epochs must be positive");
  require(beta >= 0, ErrorKind::kInvalidArgument, "beta must be non-negative");
  require(buffer_per_stage >= 0, ErrorKind::kInvalidArgument, "buffer must be non-negative");
  uap.validate();
}

Adam::Adam(std::size_t n, double lr, double weight_decay) : lr_(lr), wd_(weight_decay), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<float> params, std::span<const float> grads) {
  require(params.size() == m_.size() && grads.size() == m_.size(), ErrorKind::kShapeMismatch,
          "optimizer state size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]) + wd_ * params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] = static_cast<float>(params[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
  }
}

std::vector<TrainItem> stage_items(const synth::StageDataset& stage) {
  std::vector<TrainItem> items;
  items.reserve(stage.train_real.size() + stage.train_fake.size());
  for (const auto& s : stage.train_real) items.push_back({&s.image, 0, false});
  for (const auto& s : stage.train_fake) items.push_back({&s.image, 1, false});
  return items;
}

std::vector<TrainItem> select_buffer(const synth::StageDataset& stage, int k, std::uint64_t seed) {
  require(k >= 0, ErrorKind::kInvalidArgument, "buffer size must be non-negative");
  const auto n_real = static_cast<std::size_t>((k + 1) / 2);
  const auto n_fake = static_cast<std::size_t>(k / 2);
  if (n_real > stage.train_real.size() || n_fake > stage.train_fake.size())
    fail(ErrorKind::kKTooLarge, "buffer of " + std::to_string(k) + " exceeds the stage's training split");
  std::vector<TrainItem> out;
  Rng rng(hash_seed({seed, static_cast<std::uint64_t>(stage.stage_id), 0xb0ffULL}));
  for (auto i : sample_without_replacement(rng, stage.train_real.size(), n_real))
    out.push_back({&stage.train_real[i].image, 0, true});
  for (auto i : sample_without_replacement(rng, stage.train_fake.size(), n_fake))
    out.push_back({&stage.train_fake[i].image, 1, true});
  return out;
}

Model make_model(const TrainConfig& cfg, Shape shape) {
  return Model(make_convnet<float>(ConvNetConfig{shape, cfg.widths}), hash_seed({cfg.seed, 0x3de1ULL}));
}

namespace {

std::vector<float> gather_features(const std::vector<float>& feats, const std::vector<std::size_t>& rows, int d) {
  std::vector<float> out;
  out.reserve(rows.size() * static_cast<std::size_t>(d));
  for (auto r : rows) out.insert(out.end(), feats.begin() + static_cast<std::ptrdiff_t>(r * d),
                                 feats.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  return out;
}

std::vector<float> clamped_probs(std::span<const float> logits) {
  std::vector<float> p(logits.size());
  const float lo = std::numeric_limits<float>::min();
  const float hi = 1.0f - std::numeric_limits<float>::epsilon() / 2.0f;
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::clamp(sigmoid(logits[i]), lo, hi);
  return p;
}

/// Shared loop for base and preserve-mechanism training. With no teacher
/// this is plain cross-entropy training; the preserve terms are added only
/// when a teacher is supplied.
StageLosses train_loop(Model& model, const Model* teacher, const uap::UAPPool* pool, const synth::StageDataset& stage,
                       std::span<const TrainItem> extra, const TrainConfig& cfg, const BatchObserver& observer) {
  cfg.validate();
  std::vector<TrainItem> items = stage_items(stage);
  items.insert(items.end(), extra.begin(), extra.end());
  require(!items.empty(), ErrorKind::kEmptyStage, "stage " + std::to_string(stage.stage_id) + " has no training data");

  const Components comp = cfg.components;
  const bool preserve = teacher != nullptr;
  const bool use_pool = preserve && (comp.entropy || comp.distill_pseudo);
  if (use_pool && (pool == nullptr || pool->empty()))
    fail(ErrorKind::kEmptyPool, "stage " + std::to_string(stage.stage_id) + " needs a non-empty UAP pool");
  if (preserve) {
    require(teacher->input_shape() == model.input_shape() && teacher->feature_dim() == model.feature_dim(),
            ErrorKind::kShapeMismatch, "teacher and student architectures differ");
  }

  const int d = model.feature_dim();
  const std::size_t per = model.input_shape().size();
  const float beta = static_cast<float>(cfg.beta);
  Adam opt(model.params().size(), cfg.lr, cfg.weight_decay);
  std::vector<float> grads(model.params().size());
  StageLosses result;
  long batch_index = 0;

  std::vector<std::size_t> order(items.size());
  for (int epoch = 0; epoch < cfg.epochs_per_stage; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(hash_seed({cfg.seed, static_cast<std::uint64_t>(stage.stage_id), static_cast<std::uint64_t>(epoch),
                       0x5f1e7ULL}));
    rng.shuffle(order);

    loss::LossBreakdown sum{};
    long epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t n = end - start;
      std::vector<float> x;
      x.reserve(n * per);
      std::vector<int> labels(n);
      std::vector<std::size_t> real_rows;
      for (std::size_t k = 0; k < n; ++k) {
        const TrainItem& it = items[order[start + k]];
        x.insert(x.end(), it.image->pixels.begin(), it.image->pixels.end());
        labels[k] = it.label;
        if (it.label == 0 && !it.buffered) real_rows.push_back(k);
      }

      const auto pass = model.forward(x, true);
      const auto probs = clamped_probs(pass.logits);
      const double ce = loss::bce<float>(probs, labels);
      const auto dlogits = loss::bce_logit_grad<float>(pass.logits, labels);

      double entropy = 0, l_real = 0, l_pseudo = 0;
      std::vector<float> dfeat;
      std::optional<Model::Pass> pseudo_pass;
      std::vector<float> dlogits_pseudo, dfeat_pseudo;
      BatchRecord rec;
      const bool recording = static_cast<bool>(observer);

      if (preserve && !real_rows.empty()) {
        std::vector<float> xr;
        xr.reserve(real_rows.size() * per);
        for (auto r : real_rows) xr.insert(xr.end(), x.begin() + static_cast<std::ptrdiff_t>(r * per),
                                           x.begin() + static_cast<std::ptrdiff_t>((r + 1) * per));
        if (comp.distill_real) {
          const auto student_real = gather_features(pass.features, real_rows, d);
          const auto teacher_real = teacher->features(xr);
          l_real = loss::feat_mse<float>(student_real, teacher_real, d, cfg.distance);
          const auto g = loss::feat_mse_grad<float>(student_real, teacher_real, d, cfg.distance);
          dfeat.assign(n * static_cast<std::size_t>(d), 0.0f);
          for (std::size_t k = 0; k < real_rows.size(); ++k)
            for (int j = 0; j < d; ++j) dfeat[real_rows[k] * d + j] = beta * g[k * d + j];
          if (recording) {
            rec.student_real_features = student_real;
            rec.teacher_real_features = teacher_real;
          }
        }
        if (use_pool) {
          const std::size_t pick = static_cast<std::size_t>(batch_index) % pool->size();
          const auto xp = uap::make_pseudo(xr, pool->at(pick), cfg.uap.clamp_pseudo);
          pseudo_pass = model.forward(xp, true);
          dlogits_pseudo.assign(real_rows.size(), 0.0f);
          const auto pprobs = clamped_probs(pseudo_pass->logits);
          if (comp.entropy) {
            entropy = loss::pseudo_entropy<float>(pprobs);
            dlogits_pseudo = loss::pseudo_entropy_logit_grad<float>(pseudo_pass->logits);
          }
          if (comp.distill_pseudo) {
            const auto teacher_pseudo = teacher->features(xp);
            l_pseudo = loss::feat_mse<float>(pseudo_pass->features, teacher_pseudo, d, cfg.distance);
            dfeat_pseudo = loss::feat_mse_grad<float>(pseudo_pass->features, teacher_pseudo, d, cfg.distance);
            for (auto& v : dfeat_pseudo) v *= beta;
            if (recording) {
              rec.student_pseudo_features = pseudo_pass->features;
              rec.teacher_pseudo_features = teacher_pseudo;
            }
          }
          if (recording) {
            rec.uap_index = static_cast<int>(pick);
            rec.pseudo_probs = pprobs;
            rec.pseudo_images = xp;
          }
        }
        if (recording) rec.real_images = std::move(xr);
      }

      const auto breakdown = loss::total_loss(ce, entropy, l_real, l_pseudo, cfg.beta);
      if (recording) {
        rec.stage_id = stage.stage_id;
        rec.epoch = epoch;
        rec.batch_index = batch_index;
        rec.feature_dim = d;
        rec.labels = labels;
        rec.probs = probs;
        rec.loss = breakdown;
        rec.student = &model;
        rec.teacher = teacher;
        observer(rec);
      }

      std::fill(grads.begin(), grads.end(), 0.0f);
      model.backward(pass, dlogits, dfeat, grads, {});
      if (pseudo_pass) model.backward(*pseudo_pass, dlogits_pseudo, dfeat_pseudo, grads, {});
      opt.step(model.mutable_params(), grads);

      sum.ce += breakdown.ce;
      sum.pseudo_entropy += breakdown.pseudo_entropy;
      sum.distill_real += breakdown.distill_real;
      sum.distill_pseudo += breakdown.distill_pseudo;
      sum.total += breakdown.total;
      ++epoch_batches;
      ++batch_index;
    }
    const double nb = static_cast<double>(epoch_batches);
    result.mean_final_epoch = loss::LossBreakdown{sum.ce / nb,           sum.pseudo_entropy / nb,
                                                  sum.distill_real / nb, sum.distill_pseudo / nb,
                                                  cfg.beta,              sum.total / nb};
    result.epoch_mean_total.push_back(sum.total / nb);
  }
  result.batches = batch_index;
  return result;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string stage_file(const char* prefix, int stage, const char* ext) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s%02d%s", prefix, stage, ext);
  return name;
}

nlohmann::json losses_json(const loss::LossBreakdown& l) {
  return {{"ce", l.ce},
          {"pseudo_entropy", l.pseudo_entropy},
          {"distill_real", l.distill_real},
          {"distill_pseudo", l.distill_pseudo},
          {"beta", l.beta},
          {"total", l.total}};
}

void write_stage_result(const std::filesystem::path& dir, const StageResult& r) {
  std::filesystem::create_directories(dir / "stages");
  nlohmann::json j{{"stage_id", r.stage_id},
                   {"mean_losses", losses_json(r.losses.mean_final_epoch)},
                   {"epoch_mean_total", r.losses.epoch_mean_total},
                   {"wall_seconds", r.wall_seconds},
                   {"checkpoint", r.checkpoint_path},
                   {"uap", r.uap_path}};
  if (r.uap) {
    j["uap_attack_rate"] = r.uap->achieved_attack_rate;
    j["uap_iterations"] = r.uap->iterations_used;
    j["uap_sigma_reached"] = r.uap->sigma_reached;
  }
  io::write_text(dir / "stages" / stage_file("stage_", r.stage_id, ".json"), j.dump(2));
}

void evaluate_row(const Model& model, const std::vector<synth::StageDataset>& protocol, int row, RunResult& out) {
  for (std::size_t j = 0; j < protocol.size(); ++j) {
    const auto score = eval::evaluate_model(model, protocol[j]);
    out.acc.set(row, static_cast<int>(j + 1), score.acc);
    out.auc.set(row, static_cast<int>(j + 1), score.auc);
  }
}

void log_row(const RunOptions& opts, const RunResult& r, int row, double seconds) {
  if (!opts.log) return;
  std::string line = "stage " + std::to_string(row) + " done in " + std::to_string(seconds) + "s; acc:";
  for (int j = 1; j <= r.acc.tasks(); ++j) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), " %.1f", r.acc.get(row, j).value_or(-1));
    line += buf;
  }
  opts.log(line);
}

RunResult empty_result(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg) {
  require(protocol.size() >= 2, ErrorKind::kInvalidArgument, "a protocol needs at least 2 stages");
  for (const auto& st : protocol)
    require(!st.train_real.empty() && !st.train_fake.empty() && !st.test_real.empty() && !st.test_fake.empty(),
            ErrorKind::kEmptyStage, "stage " + std::to_string(st.stage_id) + " is missing a train or test split");
  cfg.validate();
  const Shape shape = protocol.front().train_real.front().image.shape;
  const int t = static_cast<int>(protocol.size());
  return RunResult{make_model(cfg, shape), {}, {}, eval::EvalMatrix(t), eval::EvalMatrix(t)};
}

/// Sequential runs (HDP and SFT) share this driver; `preserve` selects the
/// reserve/preserve mechanisms.
RunResult run_sequential(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                         const RunOptions& opts, bool preserve) {
  RunResult out = empty_result(protocol, cfg);
  std::vector<TrainItem> buffer;
  uap::UAPConfig ucfg = cfg.uap;
  ucfg.seed = hash_seed({cfg.seed, 0x0a9ULL});

  for (std::size_t i = 0; i < protocol.size(); ++i) {
    const auto& stage = protocol[i];
    const int t = static_cast<int>(i + 1);
    const auto t0 = Clock::now();
    StageResult sr;
    sr.stage_id = t;
    if (!preserve || t == 1) {
      sr.losses = train_stage_base(out.model, stage, cfg, buffer, opts.on_batch);
    } else {
      const Model teacher = out.model.clone_frozen();
      sr.losses = train_stage_hdp(out.model, teacher, stage, out.pool, cfg, buffer, opts.on_batch);
    }
    out.model.set_creation_stage(t);
    if (preserve) {
      std::vector<const Image*> reals;
      for (const auto& s : stage.train_real) reals.push_back(&s.image);
      auto p = uap::generate_uap(out.model, reals, ucfg, t);
      if (!p.sigma_reached && opts.log)
        opts.log("warning: stage " + std::to_string(t) + " perturbation reached attack rate " +
                 std::to_string(p.achieved_attack_rate) + " < sigma");
      sr.uap = p;
      out.pool.append(std::move(p));
    }
    sr.wall_seconds = seconds_since(t0);

    if (cfg.buffer_per_stage > 0) {
      const auto extra = select_buffer(stage, cfg.buffer_per_stage, cfg.seed);
      buffer.insert(buffer.end(), extra.begin(), extra.end());
    }
    evaluate_row(out.model, protocol, t, out);
    log_row(opts, out, t, sr.wall_seconds);

    if (opts.out_dir) {
      const auto& dir = *opts.out_dir;
      std::filesystem::create_directories(dir / "checkpoints");
      sr.checkpoint_path = (std::filesystem::path("checkpoints") / stage_file("stage_", t, ".hdpm")).string();
      save_checkpoint(out.model, dir / sr.checkpoint_path);
      if (preserve) {
        out.pool.save(dir / "uap");
        sr.uap_path = (std::filesystem::path("uap") / uap::UAPPool::file_name(t)).string();
      }
      write_stage_result(dir, sr);
    }
    out.stages.push_back(std::move(sr));
  }
  return out;
}

}  // namespace

StageLosses train_stage_base(Model& model, const synth::StageDataset& stage, const TrainConfig& cfg,
                             std::span<const TrainItem> extra, const BatchObserver& observer) {
  return train_loop(model, nullptr, nullptr, stage, extra, cfg, observer);
}

StageLosses train_stage_hdp(Model& model, const Model& teacher, const synth::StageDataset& stage,
                            const uap::UAPPool& pool, const TrainConfig& cfg, std::span<const TrainItem> extra,
                            const BatchObserver& observer) {
  return train_loop(model, &teacher, &pool, stage, extra, cfg, observer);
}

RunResult run_protocol_hdp(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                           const RunOptions& opts) {
  return run_sequential(protocol, cfg, opts, true);
}

RunResult run_protocol_sft(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                           const RunOptions& opts) {
  return run_sequential(protocol, cfg, opts, false);
}

RunResult run_protocol_joint(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                             const RunOptions& opts) {
  RunResult out = empty_result(protocol, cfg);
  const int t = static_cast<int>(protocol.size());
  // Stages 2..T ride along as extra items of stage 1 so one loop sees the union.
  std::vector<TrainItem> rest;
  for (std::size_t i = 1; i < protocol.size(); ++i) {
    const auto items = stage_items(protocol[i]);
    rest.insert(rest.end(), items.begin(), items.end());
  }
  const auto t0 = Clock::now();
  StageResult sr;
  sr.stage_id = t;
  sr.losses = train_loop(out.model, nullptr, nullptr, protocol.front(), rest, cfg, opts.on_batch);
  sr.wall_seconds = seconds_since(t0);
  out.model.set_creation_stage(t);
  evaluate_row(out.model, protocol, t, out);
  log_row(opts, out, t, sr.wall_seconds);
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir / "checkpoints");
    sr.checkpoint_path = (std::filesystem::path("checkpoints") / "joint.hdpm").string();
    save_checkpoint(out.model, *opts.out_dir / sr.checkpoint_path);
    write_stage_result(*opts.out_dir, sr);
  }
  out.stages.push_back(std::move(sr));
  return out;
}

RunResult run_protocol(const std::vector<synth::StageDataset>& protocol, const TrainConfig& cfg,
                       const RunOptions& opts) {
  switch (cfg.method) {
    case Method::kHdp: return run_protocol_hdp(protocol, cfg, opts);
    case Method::kSft: return run_protocol_sft(protocol, cfg, opts);
    case Method::kJoint: return run_protocol_joint(protocol, cfg, opts);
  }
  fail(ErrorKind::kInvalidArgument, "unknown method");
}

}  // namespace hdp::train
