#include "hdp/report.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>

#include "hdp/error.hpp"

namespace hdp {

using nlohmann::json;

json config_to_json(const train::TrainConfig& cfg) {
  return json{{"method", train::to_string(cfg.method)},
              {"lr", cfg.lr},
              {"weight_decay", cfg.weight_decay},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs_per_stage},
              {"beta", cfg.beta},
              {"seed", cfg.seed},
              {"buffer", cfg.buffer_per_stage},
              {"components", cfg.components.code()},
              {"feature_distance", cfg.distance == loss::FeatureDistance::kSquaredL2 ? "squared_l2" : "element_mse"},
              {"widths", cfg.widths},
              {"uap",
               {{"epsilon", cfg.uap.epsilon},
                {"alpha", cfg.uap.alpha},
                {"sigma", cfg.uap.sigma},
                {"max_iters", cfg.uap.max_iters},
                {"gen_subset_size", cfg.uap.gen_subset_size},
                {"batch_size", cfg.uap.batch_size},
                {"reverse_sign", cfg.uap.reverse_sign},
                {"clamp_pseudo", cfg.uap.clamp_pseudo}}}};
}

std::string config_hash(const train::TrainConfig& cfg) {
  // FNV-1a over the canonical JSON dump.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config_to_json(cfg).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void fill_summary(MetricsReport& r) {
  auto safe = [](auto fn, const eval::EvalMatrix& m) -> std::optional<double> {
    try {
      return fn(m);
    } catch (const Error&) {
      return std::nullopt;
    }
  };
  r.avg_acc = safe(eval::avg_metric, r.matrix_acc);
  r.avg_auc = safe(eval::avg_metric, r.matrix_auc);
  r.pre_acc = safe(eval::pre_metric, r.matrix_acc);
  r.pre_auc = safe(eval::pre_metric, r.matrix_auc);
  r.pre_final_acc = safe(eval::pre_final_metric, r.matrix_acc);
  r.pre_final_auc = safe(eval::pre_final_metric, r.matrix_auc);
}

MetricsReport make_report(const train::RunResult& run, const train::TrainConfig& cfg, const std::string& protocol,
                          const std::string& label) {
  MetricsReport r;
  r.protocol = protocol;
  r.method = train::to_string(cfg.method);
  r.label = label;
  r.seed = cfg.seed;
  r.beta = cfg.beta;
  r.epochs = cfg.epochs_per_stage;
  r.sigma = cfg.uap.sigma;
  r.components = cfg.components.code();
  r.buffer = cfg.buffer_per_stage;
  r.matrix_acc = run.acc;
  r.matrix_auc = run.auc;
  for (const auto& s : run.stages) r.per_stage_seconds.push_back(s.wall_seconds);
  r.config_hash = config_hash(cfg);
  r.timestamp = utc_timestamp();
  fill_summary(r);
  return r;
}

namespace {

json matrix_json(const eval::EvalMatrix& m) {
  json rows = json::array();
  for (int t = 1; t <= m.tasks(); ++t) {
    json row = json::array();
    for (int j = 1; j <= m.tasks(); ++j) {
      const auto v = m.get(t, j);
      row.push_back(v ? json(*v) : json(nullptr));
    }
    rows.push_back(row);
  }
  return rows;
}

eval::EvalMatrix matrix_from_json(const json& rows) {
  const int t = static_cast<int>(rows.size());
  eval::EvalMatrix m(t);
  for (int i = 0; i < t; ++i) {
    if (static_cast<int>(rows[i].size()) != t) fail(ErrorKind::kCorruptFile, "evaluation matrix is not square");
    for (int j = 0; j < t; ++j)
      if (!rows[i][j].is_null()) m.set(i + 1, j + 1, rows[i][j].get<double>());
  }
  return m;
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

json report_to_json(const MetricsReport& r) {
  return json{{"protocol", r.protocol},
              {"method", r.method},
              {"label", r.label},
              {"seed", r.seed},
              {"beta", r.beta},
              {"epochs", r.epochs},
              {"sigma", r.sigma},
              {"components", r.components},
              {"buffer", r.buffer},
              {"matrix_acc", matrix_json(r.matrix_acc)},
              {"matrix_auc", matrix_json(r.matrix_auc)},
              {"avg_acc", opt_json(r.avg_acc)},
              {"avg_auc", opt_json(r.avg_auc)},
              {"pre_acc", opt_json(r.pre_acc)},
              {"pre_auc", opt_json(r.pre_auc)},
              {"pre_final_acc", opt_json(r.pre_final_acc)},
              {"pre_final_auc", opt_json(r.pre_final_auc)},
              {"per_stage_seconds", r.per_stage_seconds},
              {"config_hash", r.config_hash},
              {"timestamp", r.timestamp}};
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  try {
    r.protocol = j.at("protocol").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.label = j.value("label", std::string());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.beta = j.at("beta").get<double>();
    r.epochs = j.at("epochs").get<int>();
    r.sigma = j.value("sigma", 0.0);
    r.components = j.value("components", std::string());
    r.buffer = j.value("buffer", 0);
    r.matrix_acc = matrix_from_json(j.at("matrix_acc"));
    r.matrix_auc = matrix_from_json(j.at("matrix_auc"));
    r.avg_acc = opt_from(j, "avg_acc");
    r.avg_auc = opt_from(j, "avg_auc");
    r.pre_acc = opt_from(j, "pre_acc");
    r.pre_auc = opt_from(j, "pre_auc");
    r.pre_final_acc = opt_from(j, "pre_final_acc");
    r.pre_final_auc = opt_from(j, "pre_final_auc");
    r.per_stage_seconds = j.value("per_stage_seconds", std::vector<double>{});
    r.config_hash = j.value("config_hash", std::string());
    r.timestamp = j.value("timestamp", std::string());
  } catch (const json::exception& e) {
    fail(ErrorKind::kCorruptFile, std::string("bad report JSON: ") + e.what());
  }
  return r;
}

json strip_timing(json j) {
  for (const char* key : kTimingFields) j.erase(key);
  return j;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace hdp
