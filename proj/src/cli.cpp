#include "hdp/cli.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "hdp/binary_io.hpp"
#include "hdp/checkpoint.hpp"
#include "hdp/error.hpp"
#include "hdp/random.hpp"

extern char** environ;

namespace hdp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Bad flag values detected before any work starts; mapped to exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path& executable_path() {
  static fs::path p;
  return p;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

/// Flags shared by run, sweep and the single-stage tools.
struct Flags {
  std::string protocol = "p1";
  std::string method = "hdp";
  std::uint64_t seed = 0;
  double beta = 1.0;
  int epochs = 10;
  int buffer = 0;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  int batch_size = 64;
  double epsilon = 0.15;
  double alpha = 1e-4;
  double sigma = 0.8;
  int max_iters = 5000;
  int uap_subset = 1000;
  int uap_batch = 64;
  bool reverse_sign = false;
  bool clamp_pseudo = false;
  std::string components = "111";
  std::string distance = "squared_l2";
  int train_per_class = 0;
  int test_per_class = 0;
  std::string out;
  std::string label;
  std::string config;
  bool quiet = false;
};

void add_data_flags(CLI::App* app, Flags& f) {
  app->add_option("--protocol", f.protocol, "Preset name (p1, p2, p3) or protocol JSON path")->capture_default_str();
  app->add_option("--seed", f.seed, "Run seed; presets also derive their data from it")->capture_default_str();
  app->add_option("--train-per-class", f.train_per_class, "Override training samples per class (presets)")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--test-per-class", f.test_per_class, "Override test samples per class (presets)")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--config", f.config, "key=value file; explicit flags take precedence");
}

void add_uap_flags(CLI::App* app, Flags& f) {
  app->add_option("--epsilon", f.epsilon, "Perturbation bound")->capture_default_str();
  app->add_option("--alpha", f.alpha, "Sign-step size")->capture_default_str();
  app->add_option("--sigma", f.sigma, "Target attack rate in (0,1]")->capture_default_str();
  app->add_option("--max-iters", f.max_iters, "Step budget per perturbation")->capture_default_str();
  app->add_option("--uap-subset", f.uap_subset, "Real samples drawn for generation")->capture_default_str();
  app->add_option("--uap-batch", f.uap_batch, "Generation batch size")->capture_default_str();
  app->add_flag("--uap-paper-sign", f.reverse_sign, "Descend instead of ascend log P(fake)");
  app->add_flag("--clamp-pseudo", f.clamp_pseudo, "Clamp pseudo-forged pixels to [0,1]");
}

void add_train_flags(CLI::App* app, Flags& f) {
  add_data_flags(app, f);
  add_uap_flags(app, f);
  app->add_option("--method", f.method, "hdp, sft or joint")->capture_default_str();
  app->add_option("--beta", f.beta, "Distillation weight")->capture_default_str();
  app->add_option("--epochs", f.epochs, "Epochs per stage")->capture_default_str();
  app->add_option("--buffer", f.buffer, "Real-sample replay buffer per stage")->capture_default_str();
  app->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
  app->add_option("--weight-decay", f.weight_decay, "L2 weight decay")->capture_default_str();
  app->add_option("--batch-size", f.batch_size, "Training batch size")->capture_default_str();
  app->add_option("--components", f.components, "E, L_p, L_r toggles as a 3-digit code")->capture_default_str();
  app->add_option("--feature-distance", f.distance, "squared_l2 or element_mse")->capture_default_str();
  app->add_flag("--quiet", f.quiet, "Suppress per-stage progress");
}

uap::UAPConfig uap_config(const Flags& f) {
  uap::UAPConfig u;
  u.epsilon = f.epsilon;
  u.alpha = f.alpha;
  u.sigma = f.sigma;
  u.max_iters = f.max_iters;
  u.gen_subset_size = f.uap_subset;
  u.batch_size = f.uap_batch;
  u.reverse_sign = f.reverse_sign;
  u.clamp_pseudo = f.clamp_pseudo;
  u.seed = hash_seed({f.seed, 0x0a9ULL});  // same stream the trainer uses
  return u;
}

train::TrainConfig train_config(const Flags& f) {
  train::TrainConfig c;
  c.lr = f.lr;
  c.weight_decay = f.weight_decay;
  c.batch_size = f.batch_size;
  c.epochs_per_stage = f.epochs;
  c.beta = f.beta;
  c.seed = f.seed;
  c.uap = uap_config(f);
  c.buffer_per_stage = f.buffer;
  c.method = train::parse_method(f.method);
  c.components = train::Components::from_code(f.components);
  if (f.distance == "squared_l2")
    c.distance = loss::FeatureDistance::kSquaredL2;
  else if (f.distance == "element_mse")
    c.distance = loss::FeatureDistance::kElementMse;
  else
    fail(ErrorKind::kInvalidArgument, "unknown feature distance '" + f.distance + "'");
  c.validate();
  return c;
}

/// Runs `fn` and converts validation failures into UsageError.
template <class Fn>
auto validated(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

std::function<void(const std::string&)> logger(std::ostream& err, bool quiet) {
  if (quiet) return {};
  return [&err](const std::string& line) { err << line << "\n"; };
}

json manifest_json(const std::string& command, const train::TrainConfig& cfg, const synth::ProtocolSpec& spec,
                   const fs::path& out, const std::vector<std::string>& args) {
  return json{{"command", command},
              {"tool_version", kToolVersion},
              {"timestamp", utc_timestamp()},
              {"args", args},
              {"config", config_to_json(cfg)},
              {"config_hash", config_hash(cfg)},
              {"protocol", json::parse(synth::protocol_to_json(spec))},
              {"outputs",
               {{"dir", out.string()},
                {"report", "report.json"},
                {"protocol", "protocol.json"},
                {"checkpoints", "checkpoints"},
                {"stages", "stages"},
                {"uap_pool", cfg.method == train::Method::kHdp ? json("uap") : json(nullptr)}}}};
}

MetricsReport execute_run(const train::TrainConfig& cfg, const synth::ProtocolSpec& spec,
                          const std::vector<synth::StageDataset>& data, const fs::path& out, const std::string& label,
                          const std::vector<std::string>& args, std::ostream& err, bool quiet) {
  fs::create_directories(out);
  io::write_text(out / "protocol.json", synth::protocol_to_json(spec));
  io::write_text(out / "manifest.json", manifest_json("run", cfg, spec, out, args).dump(2));
  train::RunOptions opts;
  opts.out_dir = out;
  opts.log = logger(err, quiet);
  const auto result = train::run_protocol(data, cfg, opts);
  auto report = make_report(result, cfg, spec.name, label);
  io::write_text(out / "report.json", report_to_json(report).dump(2));
  return report;
}

std::string summary_line(const MetricsReport& r) {
  const auto row = make_row(r);
  return row.name + " seed " + std::to_string(r.seed) + ": AVG_acc " + row.avg_acc + " AVG_auc " + row.avg_auc +
         " PRE_acc " + row.pre_acc + " PRE_auc " + row.pre_auc;
}

int cmd_run(Flags& f, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto cfg = validated([&] { return train_config(f); });
  const auto spec = validated([&] { return resolve_protocol(f.protocol, f.seed, f.train_per_class, f.test_per_class); });
  const auto data = synth::build_protocol(spec);
  const auto report = execute_run(cfg, spec, data, f.out, f.label, args, err, f.quiet);
  out << summary_line(report) << "\n";
  return kExitOk;
}

/// Flag assignments for one sweep point, on top of the base flags.
void apply_setting(Flags& f, const std::string& key, const std::string& value) {
  try {
    if (key == "sigma")
      f.sigma = std::stod(value);
    else if (key == "beta")
      f.beta = std::stod(value);
    else if (key == "components")
      f.components = value;
    else
      throw UsageError("unknown grid axis '" + key + "'");
  } catch (const std::logic_error&) {
    throw UsageError("bad grid value '" + value + "' for " + key);
  }
}

std::string config_text(const Flags& f) {
  std::ostringstream os;
  os.precision(17);
  os << "protocol = " << f.protocol << "\nmethod = " << f.method << "\nseed = " << f.seed << "\nbeta = " << f.beta
     << "\nepochs = " << f.epochs << "\nbuffer = " << f.buffer << "\nlr = " << f.lr
     << "\nweight-decay = " << f.weight_decay << "\nbatch-size = " << f.batch_size << "\nepsilon = " << f.epsilon
     << "\nalpha = " << f.alpha << "\nsigma = " << f.sigma << "\nmax-iters = " << f.max_iters
     << "\nuap-subset = " << f.uap_subset << "\nuap-batch = " << f.uap_batch
     << "\nuap-paper-sign = " << (f.reverse_sign ? "true" : "false")
     << "\nclamp-pseudo = " << (f.clamp_pseudo ? "true" : "false") << "\ncomponents = " << f.components
     << "\nfeature-distance = " << f.distance << "\ntrain-per-class = " << f.train_per_class
     << "\ntest-per-class = " << f.test_per_class << "\n";
  return os.str();
}

/// Launches `hdp run` for each point, at most `jobs` at a time.
void run_points_parallel(const std::vector<std::pair<Flags, fs::path>>& points, int jobs, std::ostream& err) {
  const fs::path exe = executable_path();
  if (exe.empty()) fail(ErrorKind::kInvalidArgument, "parallel sweeps need the hdp executable path");
  std::size_t next = 0;
  int running = 0;
  bool failed = false;
  while (next < points.size() || running > 0) {
    while (running < jobs && next < points.size()) {
      const auto& [pf, dir] = points[next++];
      fs::create_directories(dir);
      io::write_text(dir / "point.cfg", config_text(pf));
      std::vector<std::string> argv_s{exe.string(), "run", "--config", (dir / "point.cfg").string(), "--out",
                                      dir.string(),  "--label", pf.label, "--quiet"};
      std::vector<char*> argv;
      for (auto& s : argv_s) argv.push_back(s.data());
      argv.push_back(nullptr);
      const std::string log = (dir / "run.log").string();
      posix_spawn_file_actions_t actions;
      posix_spawn_file_actions_init(&actions);
      posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
      posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
      pid_t pid = 0;
      const int rc = posix_spawn(&pid, exe.c_str(), &actions, nullptr, argv.data(), environ);
      posix_spawn_file_actions_destroy(&actions);
      if (rc != 0) fail(ErrorKind::kIOFailure, "cannot launch " + exe.string());
      ++running;
    }
    int status = 0;
    if (waitpid(-1, &status, 0) < 0) fail(ErrorKind::kIOFailure, "waitpid failed");
    --running;
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed = true;
  }
  if (failed) {
    err << "one or more sweep points failed; see run.log in the point directories\n";
    fail(ErrorKind::kIOFailure, "sweep point failed");
  }
}

std::string csv_number(const std::optional<double>& v) {
  if (!v) return {};
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", *v);
  return buf;
}

int cmd_sweep(Flags& f, const std::vector<std::string>& grid_args, int jobs, const std::vector<std::string>& args,
              std::ostream& out, std::ostream& err) {
  std::vector<GridAxis> axes;
  for (const auto& g : grid_args)
    for (const auto& part : split(g, ';'))
      if (!part.empty()) axes.push_back(validated([&] { return parse_grid_axis(part); }));
  if (axes.empty()) throw UsageError("empty grid");
  const auto grid = expand_grid(axes);

  std::vector<std::pair<Flags, fs::path>> points;
  std::vector<train::TrainConfig> cfgs;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    Flags pf = f;
    for (const auto& [k, v] : grid[i].settings) apply_setting(pf, k, v);
    pf.label = grid[i].label;
    cfgs.push_back(validated([&] { return train_config(pf); }));
    char name[32];
    std::snprintf(name, sizeof(name), "point_%03zu", i);
    points.emplace_back(pf, fs::path(f.out) / name);
  }
  const auto spec = validated([&] { return resolve_protocol(f.protocol, f.seed, f.train_per_class, f.test_per_class); });

  fs::create_directories(f.out);
  json m = manifest_json("sweep", train_config(f), spec, f.out, args);
  json pts = json::array();
  for (std::size_t i = 0; i < grid.size(); ++i)
    pts.push_back({{"label", grid[i].label}, {"dir", points[i].second.filename().string()}});
  m["points"] = pts;
  m["jobs"] = jobs;
  io::write_text(fs::path(f.out) / "manifest.json", m.dump(2));

  if (jobs > 1) {
    run_points_parallel(points, jobs, err);
  } else {
    const auto data = synth::build_protocol(spec);
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!f.quiet) err << "point " << grid[i].label << "\n";
      execute_run(cfgs[i], spec, data, points[i].second, grid[i].label, args, err, f.quiet);
    }
  }

  std::ostringstream csv;
  csv << "label,dir,method,seed,sigma,beta,components,avg_acc,avg_auc,pre_acc,pre_auc,pre_final_acc,pre_final_auc\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto r = report_from_json(json::parse(io::read_text(points[i].second / "report.json")));
    csv << r.label << "," << points[i].second.filename().string() << "," << r.method << "," << r.seed << ","
        << csv_number(r.sigma) << "," << csv_number(r.beta) << "," << r.components << "," << csv_number(r.avg_acc)
        << "," << csv_number(r.avg_auc) << "," << csv_number(r.pre_acc) << "," << csv_number(r.pre_auc) << ","
        << csv_number(r.pre_final_acc) << "," << csv_number(r.pre_final_auc) << "\n";
    out << summary_line(r) << "\n";
  }
  io::write_text(fs::path(f.out) / "summary.csv", csv.str());
  return kExitOk;
}

int cmd_report(const std::string& in_dir, const std::string& csv_path, std::ostream& out) {
  if (!fs::is_directory(in_dir)) throw UsageError("not a directory: " + in_dir);
  const auto files = find_reports(in_dir);
  if (files.empty()) throw UsageError("no report.json found below " + in_dir);
  std::vector<ReportRow> rows;
  for (const auto& p : files) rows.push_back(make_row(report_from_json(json::parse(io::read_text(p)))));

  const std::vector<std::string> head{"method", "protocol", "seed", "AVG_acc", "AVG_auc", "PRE_acc", "PRE_auc"};
  auto cells = [](const ReportRow& r) {
    return std::vector<std::string>{r.name,    r.protocol, std::to_string(r.seed), r.avg_acc,
                                    r.avg_auc, r.pre_acc,  r.pre_auc};
  };
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) width[c] = head[c].size();
  for (const auto& r : rows) {
    const auto cs = cells(r);
    for (std::size_t c = 0; c < cs.size(); ++c) width[c] = std::max(width[c], cs[c].size());
  }
  auto print = [&](const std::vector<std::string>& cs) {
    for (std::size_t c = 0; c < cs.size(); ++c) {
      if (c) out << "  ";
      // Text columns left-aligned, numbers right-aligned.
      const std::string pad(width[c] - cs[c].size(), ' ');
      out << (c < 2 ? cs[c] + pad : pad + cs[c]);
    }
    out << "\n";
  };
  print(head);
  for (const auto& r : rows) print(cells(r));

  if (!csv_path.empty()) {
    std::ostringstream csv;
    csv << "method,protocol,seed,avg_acc,avg_auc,pre_acc,pre_auc\n";
    for (const auto& r : rows) {
      const auto cs = cells(r);
      for (std::size_t c = 0; c < cs.size(); ++c) csv << (c ? "," : "") << cs[c];
      csv << "\n";
    }
    io::write_text(csv_path, csv.str());
  }
  return kExitOk;
}

synth::StageDataset single_stage(const Flags& f, int stage) {
  const auto spec = validated([&] { return resolve_protocol(f.protocol, f.seed, f.train_per_class, f.test_per_class); });
  if (stage < 1 || stage > static_cast<int>(spec.stages.size()))
    throw UsageError("--stage must be in 1.." + std::to_string(spec.stages.size()));
  return synth::build_stage(spec.stages[stage - 1], stage, spec.global_seed, spec.shape);
}

int cmd_gen_uap(Flags& f, const std::string& checkpoint, int stage, std::ostream& out, std::ostream& err) {
  const auto ucfg = validated([&] {
    auto u = uap_config(f);
    u.validate();
    return u;
  });
  const auto data = single_stage(f, stage);
  const auto model = load_checkpoint(checkpoint);
  std::vector<const Image*> reals;
  for (const auto& s : data.train_real) reals.push_back(&s.image);
  const auto p = uap::generate_uap(model, reals, ucfg, stage);
  const fs::path path = f.out;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  uap::write_perturbation(path, p);
  json side{{"file", path.filename().string()},
            {"checkpoint", checkpoint},
            {"protocol", f.protocol},
            {"stage_id", stage},
            {"seed", f.seed},
            {"epsilon", p.epsilon},
            {"alpha", ucfg.alpha},
            {"sigma", ucfg.sigma},
            {"attack_rate", p.achieved_attack_rate},
            {"iterations_used", p.iterations_used},
            {"sigma_reached", p.sigma_reached},
            {"warning", p.sigma_reached ? json(nullptr) : json("sigma unreached within max_iters; best-so-far saved")},
            {"tool_version", kToolVersion}};
  io::write_text(path.string() + ".json", side.dump(2));
  char buf[96];
  std::snprintf(buf, sizeof(buf), "attack_rate %.6f iterations %d", p.achieved_attack_rate, p.iterations_used);
  out << buf << "\n";
  if (!p.sigma_reached) {
    err << "warning: attack rate below sigma " << ucfg.sigma << " after " << p.iterations_used << " iterations\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_dump_stage(Flags& f, int stage, std::ostream& out) {
  const auto data = single_stage(f, stage);
  synth::dump_stage(data, f.out);
  out << "wrote " << (data.train_real.size() + data.train_fake.size() + data.test_real.size() + data.test_fake.size())
      << " images to " << f.out << "\n";
  return kExitOk;
}

int cmd_dump_features(Flags& f, const std::string& checkpoint, int stage, const std::string& uap_file,
                      std::ostream& out) {
  const auto data = single_stage(f, stage);
  const auto model = load_checkpoint(checkpoint);
  std::optional<uap::Perturbation> p;
  if (!uap_file.empty()) p = uap::read_perturbation(uap_file);
  std::vector<std::vector<float>> pseudo;
  std::vector<eval::DumpSample> samples;
  int id = 0;
  for (const auto& s : data.test_real) samples.push_back({id++, stage, "real", s.image.pixels.data()});
  for (const auto& s : data.test_fake) samples.push_back({id++, stage, "fake", s.image.pixels.data()});
  if (p) {
    pseudo.reserve(data.test_real.size());
    for (const auto& s : data.test_real) pseudo.push_back(uap::make_pseudo(s.image.pixels, *p, f.clamp_pseudo));
    for (const auto& px : pseudo) samples.push_back({id++, stage, "pseudo", px.data()});
  }
  const fs::path path = f.out;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  eval::feature_dump(model, samples, path);
  out << "wrote " << samples.size() << " feature rows to " << path.string() << "\n";
  return kExitOk;
}

std::string find_config_arg(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::kInvalidArgument, "config line " + std::to_string(n) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    while (!key.empty() && key[0] == '-') key.erase(0, 1);
    if (key.empty()) fail(ErrorKind::kInvalidArgument, "config line " + std::to_string(n) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::vector<std::string> apply_config(std::vector<std::string> args, const std::map<std::string, std::string>& config) {
  const auto given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> extra;
  for (const auto& [key, value] : config) {
    if (key == "config" || given(key)) continue;
    if (value == "true")
      extra.push_back("--" + key);
    else if (value != "false")
      extra.push_back("--" + key + "=" + value);
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

GridAxis parse_grid_axis(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) fail(ErrorKind::kInvalidArgument, "grid axis needs name=values: '" + text + "'");
  GridAxis axis;
  axis.name = trim(text.substr(0, eq));
  if (axis.name != "sigma" && axis.name != "beta" && axis.name != "components")
    fail(ErrorKind::kInvalidArgument, "unknown grid axis '" + axis.name + "'");
  for (const auto& v : split(text.substr(eq + 1), ',')) {
    if (v.empty()) continue;
    if (axis.name == "components" && v == "*") {
      for (int bits = 7; bits >= 0; --bits) {
        std::string code = {char('0' + ((bits >> 2) & 1)), char('0' + ((bits >> 1) & 1)), char('0' + (bits & 1))};
        axis.values.push_back(code);
      }
      continue;
    }
    if (axis.name == "components") train::Components::from_code(v);  // validates
    axis.values.push_back(v);
  }
  if (axis.values.empty()) fail(ErrorKind::kInvalidArgument, "grid axis '" + axis.name + "' has no values");
  return axis;
}

std::vector<GridPoint> expand_grid(const std::vector<GridAxis>& axes) {
  std::vector<GridPoint> points{GridPoint{}};
  for (const auto& axis : axes) {
    std::vector<GridPoint> next;
    for (const auto& p : points)
      for (const auto& v : axis.values) {
        GridPoint q = p;
        q.settings.emplace_back(axis.name, v);
        q.label += (q.label.empty() ? "" : " ") + axis.name + "=" + v;
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }
  if (axes.empty()) points.clear();
  return points;
}

synth::ProtocolSpec resolve_protocol(const std::string& name_or_path, std::uint64_t seed, int train_per_class,
                                     int test_per_class) {
  synth::ProtocolSpec spec;
  if (synth::is_preset_name(name_or_path)) {
    synth::StageSizes sizes;
    if (train_per_class > 0) sizes.train_per_class = train_per_class;
    if (test_per_class > 0) sizes.test_per_class = test_per_class;
    spec = synth::preset(name_or_path, seed, sizes);
  } else {
    if (!fs::is_regular_file(name_or_path))
      fail(ErrorKind::kInvalidArgument, "unknown protocol '" + name_or_path + "' (not a preset or file)");
    spec = synth::protocol_from_json(io::read_text(name_or_path));
    for (auto& s : spec.stages) {
      if (train_per_class > 0) s.sizes.train_per_class = train_per_class;
      if (test_per_class > 0) s.sizes.test_per_class = test_per_class;
    }
  }
  spec.validate();
  return spec;
}

std::string format_metric(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

ReportRow make_row(const MetricsReport& r) {
  return ReportRow{r.label.empty() ? r.method : r.label,
                   r.protocol,
                   r.seed,
                   format_metric(r.avg_acc),
                   format_metric(r.avg_auc),
                   format_metric(r.pre_acc),
                   format_metric(r.pre_auc)};
}

std::vector<fs::path> find_reports(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "report.json") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

void set_executable(const fs::path& path) { executable_path() = path; }

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args = raw_args;
  CLI::App app{"Continual forgery detection with perturbation replay and feature distillation", "hdp"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Flags f;
  std::vector<std::string> grid;
  int jobs = 1;
  std::string in_dir, csv_path, checkpoint, uap_file;
  int stage = 0;

  auto* run_cmd = app.add_subcommand("run", "Train one method over a protocol and write its report");
  add_train_flags(run_cmd, f);
  run_cmd->add_option("--out", f.out, "Output directory")->required();
  run_cmd->add_option("--label", f.label, "Name recorded in the report");

  auto* sweep_cmd = app.add_subcommand("sweep", "Run a grid of sigma/beta/components settings");
  add_train_flags(sweep_cmd, f);
  sweep_cmd->add_option("--out", f.out, "Output directory")->required();
  sweep_cmd->add_option("--grid", grid, "Axis such as sigma=0.6,0.8 or components=*; repeatable or ';'-separated");
  sweep_cmd->add_option("--jobs", jobs, "Parallel worker processes")->check(CLI::PositiveNumber)->capture_default_str();

  auto* report_cmd = app.add_subcommand("report", "Tabulate report.json files below a directory");
  report_cmd->add_option("--in", in_dir, "Directory to scan")->required();
  report_cmd->add_option("--csv", csv_path, "Also write the table as CSV");

  auto* gen_cmd = app.add_subcommand("gen-uap", "Generate one perturbation for a checkpoint and stage");
  add_data_flags(gen_cmd, f);
  add_uap_flags(gen_cmd, f);
  gen_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  gen_cmd->add_option("--stage", stage, "1-based stage id")->required();
  gen_cmd->add_option("--out", f.out, "Perturbation file to write")->required();

  auto* dump_cmd = app.add_subcommand("dump-stage", "Write one stage's images and index");
  add_data_flags(dump_cmd, f);
  dump_cmd->add_option("--stage", stage, "1-based stage id")->required();
  dump_cmd->add_option("--out", f.out, "Output directory")->required();

  auto* feat_cmd = app.add_subcommand("dump-features", "Write penultimate features of a stage's test set as CSV");
  add_data_flags(feat_cmd, f);
  feat_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  feat_cmd->add_option("--stage", stage, "1-based stage id")->required();
  feat_cmd->add_option("--uap", uap_file, "Also dump real+perturbation rows");
  feat_cmd->add_flag("--clamp-pseudo", f.clamp_pseudo, "Clamp pseudo-forged pixels to [0,1]");
  feat_cmd->add_option("--out", f.out, "CSV file to write")->required();

  try {
    const std::string config_path = find_config_arg(args);
    if (!config_path.empty()) {
      std::map<std::string, std::string> config;
      try {
        config = parse_config_text(io::read_text(config_path));
      } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
      }
      args = apply_config(args, config);
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (run_cmd->parsed()) return cmd_run(f, raw_args, out, err);
    if (sweep_cmd->parsed()) return cmd_sweep(f, grid, jobs, raw_args, out, err);
    if (report_cmd->parsed()) return cmd_report(in_dir, csv_path, out);
    if (gen_cmd->parsed()) return cmd_gen_uap(f, checkpoint, stage, out, err);
    if (dump_cmd->parsed()) return cmd_dump_stage(f, stage, out);
    if (feat_cmd->parsed()) return cmd_dump_features(f, checkpoint, stage, uap_file, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int main(int argc, char** argv) {
  std::error_code ec;
  const auto self = fs::read_symlink("/proc/self/exe", ec);
  executable_path() = ec ? fs::path(argv[0]) : self;
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace hdp::cli
