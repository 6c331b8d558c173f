#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hdp/binary_io.hpp"
#include "hdp/checkpoint.hpp"
#include "hdp/detector.hpp"
#include "hdp/uap.hpp"
#include "hdp/cli.hpp"
#include "hdp/eval.hpp"
#include "hdp/report.hpp"
#include "test_util.hpp"

using namespace hdp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result hdp_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

/// Two 8x8 stages with a handful of samples, written as protocol JSON.
fs::path tiny_protocol(const fs::path& dir, int stages = 2) {
  auto spec = synth::preset("p1", 3, {16, 8});
  spec.name = "tiny";
  spec.shape = Shape{3, 8, 8};
  spec.stages.resize(stages);
  const auto path = dir / "tiny.json";
  io::write_text(path, synth::protocol_to_json(spec));
  return path;
}

std::vector<std::string> fast_flags(const fs::path& proto) {
  return {"--protocol", proto.string(), "--epochs", "1", "--batch-size", "16", "--alpha", "0.01",
          "--max-iters", "20", "--uap-subset", "16", "--uap-batch", "8", "--quiet"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

json read_json(const fs::path& p) { return json::parse(io::read_text(p)); }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

eval::EvalMatrix matrix_from(const json& m) {
  eval::EvalMatrix r(static_cast<int>(m.size()));
  for (std::size_t t = 0; t < m.size(); ++t)
    for (std::size_t j = 0; j < m[t].size(); ++j)
      if (!m[t][j].is_null()) r.set(static_cast<int>(t + 1), static_cast<int>(j + 1), m[t][j].get<double>());
  return r;
}

}  // namespace

TEST_CASE("usage errors exit 2, help exits 0") {
  testutil::TempDir dir;
  CHECK(hdp_cli({}).code == cli::kExitUsage);
  CHECK(hdp_cli({"--help"}).code == cli::kExitOk);
  CHECK(hdp_cli({"run"}).code == cli::kExitUsage);
  CHECK(hdp_cli({"frobnicate"}).code == cli::kExitUsage);

  const auto bad_sigma = hdp_cli({"run", "--method", "hdp", "--sigma", "1.5", "--out", (dir.path / "r").string()});
  CHECK(bad_sigma.code == cli::kExitUsage);
  CHECK(bad_sigma.err.find("sigma must be in (0,1]") != std::string::npos);
  CHECK_FALSE(fs::exists(dir.path / "r" / "report.json"));

  CHECK(hdp_cli({"run", "--method", "lwf", "--out", (dir.path / "r").string()}).code == cli::kExitUsage);
  CHECK(hdp_cli({"run", "--protocol", "p9", "--out", (dir.path / "r").string()}).code == cli::kExitUsage);
  CHECK(hdp_cli({"run", "--components", "12", "--out", (dir.path / "r").string()}).code == cli::kExitUsage);
  CHECK(hdp_cli({"run", "--epochs", "zero", "--out", (dir.path / "r").string()}).code == cli::kExitUsage);
  CHECK(hdp_cli({"sweep", "--out", (dir.path / "s").string()}).code == cli::kExitUsage);
  CHECK(hdp_cli({"sweep", "--grid", "gamma=1", "--out", (dir.path / "s").string()}).code == cli::kExitUsage);
  CHECK(hdp_cli({"report", "--in", dir.path.string()}).code == cli::kExitUsage);
}

TEST_CASE("runtime failures exit 3") {
  testutil::TempDir dir;
  const auto r = hdp_cli({"gen-uap", "--checkpoint", (dir.path / "missing.hdpm").string(), "--stage", "1", "--out",
                      (dir.path / "u.bin").string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("run writes a complete, reproducible output directory") {
  testutil::TempDir dir;
  const auto proto = tiny_protocol(dir.path);
  const auto a = dir.path / "a", b = dir.path / "b";
  const auto ra = hdp_cli(concat({"run", "--method", "hdp", "--seed", "4", "--out", a.string()}, fast_flags(proto)));
  REQUIRE(ra.code == 0);
  CHECK(ra.out.find("AVG_acc") != std::string::npos);
  REQUIRE(hdp_cli(concat({"run", "--method", "hdp", "--seed", "4", "--out", b.string()}, fast_flags(proto))).code == 0);

  for (const char* f : {"report.json", "manifest.json", "protocol.json", "checkpoints/stage_02.hdpm",
                        "uap/pool.json", "uap/uap_stage_02.bin", "stages/stage_01.json"})
    CHECK(fs::exists(a / f));

  const auto report = read_json(a / "report.json");
  for (const char* k : {"protocol", "method", "seed", "beta", "epochs", "matrix_acc", "matrix_auc", "avg_acc",
                        "avg_auc", "pre_acc", "pre_auc", "pre_final_acc", "pre_final_auc", "per_stage_seconds"})
    CHECK(report.contains(k));
  CHECK(report["matrix_acc"].size() == 2);
  CHECK(report["method"] == "hdp");
  const auto acc = matrix_from(report["matrix_acc"]);
  CHECK(eval::avg_metric(acc) == report["avg_acc"].get<double>());
  CHECK(eval::pre_metric(acc) == report["pre_acc"].get<double>());
  CHECK(eval::pre_final_metric(acc) == report["pre_final_acc"].get<double>());

  // Byte-identical apart from the wall-clock fields.
  auto strip = [](json j) {
    for (const char* k : kTimingFields) j.erase(k);
    return j.dump(2);
  };
  CHECK(strip(report) == strip(read_json(b / "report.json")));
  CHECK(io::read_text(a / "checkpoints/stage_02.hdpm") == io::read_text(b / "checkpoints/stage_02.hdpm"));

  const auto manifest = read_json(a / "manifest.json");
  CHECK(manifest["command"] == "run");
  CHECK(manifest["tool_version"] == cli::kToolVersion);
  CHECK(manifest.contains("timestamp"));
  const auto& cfg = manifest["config"];
  CHECK(cfg["uap"]["epsilon"] == 0.15);
  CHECK(cfg["uap"]["sigma"] == 0.8);
  CHECK(cfg["uap"]["alpha"] == 0.01);
  CHECK(cfg["lr"] == 1e-3);
  CHECK(cfg["weight_decay"] == 1e-5);
  CHECK(cfg["epochs"] == 1);
  CHECK(manifest["protocol"]["stages"].size() == 2);
}

TEST_CASE("config file fills in flags the command line leaves out") {
  testutil::TempDir dir;
  const auto proto = tiny_protocol(dir.path);
  io::write_text(dir.path / "c.cfg", "# comment\nbeta = 0.5\nepochs=1\n\nmethod = sft\nseed = 9\n");
  const auto out = dir.path / "o";
  auto args = fast_flags(proto);
  args.erase(args.begin() + 2, args.begin() + 4);  // drop --epochs
  const auto r = hdp_cli(concat({"run", "--config", (dir.path / "c.cfg").string(), "--beta", "0.25", "--out",
                             out.string()}, args));
  REQUIRE(r.code == 0);
  const auto cfg = read_json(out / "manifest.json")["config"];
  CHECK(cfg["beta"] == 0.25);
  CHECK(cfg["epochs"] == 1);
  CHECK(cfg["method"] == "sft");
  CHECK(cfg["seed"] == 9);
  CHECK_FALSE(fs::exists(out / "uap"));

  io::write_text(dir.path / "bad.cfg", "this line has no equals sign\n");
  CHECK(hdp_cli({"run", "--config", (dir.path / "bad.cfg").string(), "--out", out.string()}).code == cli::kExitUsage);
  CHECK(hdp_cli({"run", "--config", (dir.path / "none.cfg").string(), "--out", out.string()}).code ==
        cli::kExitUsage);
}

TEST_CASE("config and grid helpers") {
  const auto c = cli::parse_config_text("a = 1\n# x\n  b=two words \n\n");
  CHECK(c.size() == 2);
  CHECK(c.at("a") == "1");
  CHECK(c.at("b") == "two words");

  const auto args = cli::apply_config({"run", "--beta", "3", "--seed=4"}, {{"beta", "1"}, {"seed", "2"}, {"epochs", "5"}});
  CHECK(std::find(args.begin(), args.end(), "--epochs=5") != args.end());
  CHECK(std::find(args.begin(), args.end(), "--beta=1") == args.end());
  CHECK(std::find(args.begin(), args.end(), "--seed=2") == args.end());

  const auto ax = cli::parse_grid_axis("sigma=0.6,0.8,1.0");
  CHECK(ax.name == "sigma");
  CHECK(ax.values.size() == 3);
  const auto all = cli::parse_grid_axis("components=*");
  CHECK(all.values.size() == 8);
  CHECK(all.values.front() == "111");
  CHECK(std::find(all.values.begin(), all.values.end(), "000") != all.values.end());

  const auto g = cli::expand_grid({ax, cli::parse_grid_axis("beta=0,1")});
  REQUIRE(g.size() == 6);
  CHECK(g[0].label == "sigma=0.6 beta=0");
  CHECK(g[1].label == "sigma=0.6 beta=1");
  CHECK(g[5].settings.back().second == "1");
}

TEST_CASE("sigma sweep and the all-off components point") {
  testutil::TempDir dir;
  const auto proto = tiny_protocol(dir.path);
  const auto s = dir.path / "s";
  const auto r = hdp_cli(concat({"sweep", "--grid", "sigma=0.6,0.8,1.0", "--out", s.string()}, fast_flags(proto)));
  REQUIRE(r.code == 0);
  const auto rows = read_csv(s / "summary.csv");
  REQUIRE(rows.size() == 4);
  for (int i = 0; i < 3; ++i) CHECK(fs::exists(s / ("point_00" + std::to_string(i)) / "report.json"));
  CHECK(rows[1][4] == "0.59999999999999998");
  CHECK(read_json(s / "manifest.json")["points"].size() == 3);

  const auto c = dir.path / "c";
  REQUIRE(hdp_cli(concat({"sweep", "--grid", "components=000", "--seed", "2", "--out", c.string()}, fast_flags(proto)))
              .code == 0);
  const auto sft = dir.path / "sft";
  REQUIRE(hdp_cli(concat({"run", "--method", "sft", "--seed", "2", "--out", sft.string()}, fast_flags(proto))).code == 0);
  const auto off = read_json(c / "point_000" / "report.json");
  const auto base = read_json(sft / "report.json");
  CHECK(off["matrix_acc"] == base["matrix_acc"]);
  CHECK(off["matrix_auc"] == base["matrix_auc"]);
  CHECK(off["pre_acc"] == base["pre_acc"]);
}

TEST_CASE("parallel sweep matches the sequential one") {
  testutil::TempDir dir;
  cli::set_executable(HDP_CLI_PATH);
  const auto proto = tiny_protocol(dir.path);
  const auto seq = dir.path / "seq", par = dir.path / "par";
  const auto grid = std::vector<std::string>{"--grid", "beta=0,1;components=111,100"};
  REQUIRE(hdp_cli(concat(concat({"sweep", "--out", seq.string()}, grid), fast_flags(proto))).code == 0);
  REQUIRE(hdp_cli(concat(concat({"sweep", "--jobs", "2", "--out", par.string()}, grid), fast_flags(proto))).code == 0);
  const auto a = read_csv(seq / "summary.csv"), b = read_csv(par / "summary.csv");
  REQUIRE(a.size() == 5);
  CHECK(a == b);
  CHECK(fs::exists(par / "point_003" / "run.log"));
}

TEST_CASE("report table and csv agree") {
  testutil::TempDir dir;
  const auto proto = tiny_protocol(dir.path);
  REQUIRE(hdp_cli(concat({"run", "--method", "sft", "--out", (dir.path / "runs/sft").string()}, fast_flags(proto))).code ==
          0);
  REQUIRE(hdp_cli(concat({"run", "--method", "joint", "--out", (dir.path / "runs/joint").string()}, fast_flags(proto)))
              .code == 0);
  const auto csv = dir.path / "t.csv";
  const auto r = hdp_cli({"report", "--in", (dir.path / "runs").string(), "--csv", csv.string()});
  REQUIRE(r.code == 0);

  std::vector<std::vector<std::string>> printed;
  std::istringstream lines(r.out);
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream ws(line);
    std::vector<std::string> cells;
    std::string c;
    while (ws >> c) cells.push_back(c);
    printed.push_back(cells);
  }
  const auto rows = read_csv(csv);
  REQUIRE(printed.size() == 3);
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 1; i < 3; ++i) CHECK(printed[i] == rows[i]);

  // Printed cells are the formatted metrics of the stored matrix. Joint only
  // fills the last row, which for two stages is all PRE reads.
  for (std::size_t i = 1; i < 3; ++i) {
    const auto rep = read_json(dir.path / "runs" / rows[i][0] / "report.json");
    CHECK(rows[i][3] == cli::format_metric(eval::avg_metric(matrix_from(rep["matrix_acc"]))));
  }
  CHECK(rows[1][0] == "joint");
  const auto joint = matrix_from(read_json(dir.path / "runs/joint/report.json")["matrix_acc"]);
  CHECK(rows[1][5] == cli::format_metric(eval::pre_final_metric(joint)));
}

TEST_CASE("gen-uap writes a bounded perturbation") {
  testutil::TempDir dir;
  const auto proto = tiny_protocol(dir.path);
  const auto run = dir.path / "run";
  REQUIRE(hdp_cli(concat({"run", "--method", "sft", "--out", run.string()}, fast_flags(proto))).code == 0);
  const auto out = dir.path / "u" / "p.bin";
  const auto r = hdp_cli({"gen-uap", "--checkpoint", (run / "checkpoints/stage_01.hdpm").string(), "--protocol",
                      proto.string(), "--stage", "1", "--epsilon", "0.07", "--alpha", "0.01", "--max-iters", "30",
                      "--uap-subset", "16", "--out", out.string()});
  CHECK((r.code == 0 || r.code == cli::kExitRuntime));
  REQUIRE(fs::exists(out));
  double rate = -1;
  int iters = -1;
  CHECK(std::sscanf(r.out.c_str(), "attack_rate %lf iterations %d", &rate, &iters) == 2);
  CHECK(rate >= 0.0);
  CHECK(rate <= 1.0);

  // Independent reader: skip the fixed header, scan the float payload.
  const auto bytes = testutil::read_bytes(out);
  REQUIRE(bytes.size() == 36 + 4 * 3 * 8 * 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "HDPU");
  float max_abs = 0;
  for (std::size_t off = 36; off < bytes.size(); off += 4) {
    float v;
    std::memcpy(&v, bytes.data() + off, 4);
    max_abs = std::max(max_abs, std::abs(v));
  }
  CHECK(max_abs <= 0.07f);

  const auto side = read_json(out.string() + ".json");
  CHECK(side["iterations_used"] == iters);

  uap::UAPPool pool;
  pool.append(uap::read_perturbation(out));
  pool.save(dir.path / "pool");
  CHECK(uap::UAPPool::load(dir.path / "pool").at(0).delta == pool.at(0).delta);
}

TEST_CASE("gen-uap reports an unreachable sigma") {
  testutil::TempDir dir;
  const auto proto = tiny_protocol(dir.path);
  Model m(make_convnet<float>(ConvNetConfig{Shape{3, 8, 8}, {16, 32, 64}}), 1);
  m.set_head(std::vector<float>(64, 0.0f), -20.0f);  // always real
  save_checkpoint(m, dir.path / "real.hdpm");
  const auto out = dir.path / "p.bin";
  const auto r = hdp_cli({"gen-uap", "--checkpoint", (dir.path / "real.hdpm").string(), "--protocol", proto.string(),
                      "--stage", "2", "--max-iters", "3", "--uap-subset", "16", "--out", out.string()});
  CHECK(r.code == cli::kExitRuntime);
  CHECK(r.err.find("warning") != std::string::npos);
  REQUIRE(fs::exists(out));
  const auto side = read_json(out.string() + ".json");
  CHECK(side["sigma_reached"] == false);
  CHECK(side["warning"].is_string());
  CHECK(side["iterations_used"] == 3);
}

TEST_CASE("dump-stage and dump-features") {
  testutil::TempDir dir;
  const auto proto = tiny_protocol(dir.path);
  const auto st = dir.path / "stage";
  const auto r = hdp_cli({"dump-stage", "--protocol", proto.string(), "--stage", "2", "--out", st.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("wrote 48 images") != std::string::npos);
  CHECK(hdp_cli({"dump-stage", "--protocol", proto.string(), "--stage", "3", "--out", st.string()}).code ==
        cli::kExitUsage);

  const auto run = dir.path / "run";
  REQUIRE(hdp_cli(concat({"run", "--method", "hdp", "--out", run.string()}, fast_flags(proto))).code == 0);
  const auto csv = dir.path / "f.csv";
  REQUIRE(hdp_cli({"dump-features", "--protocol", proto.string(), "--checkpoint",
               (run / "checkpoints/stage_02.hdpm").string(), "--stage", "1", "--uap",
               (run / "uap/uap_stage_01.bin").string(), "--out", csv.string()})
              .code == 0);
  const auto t = eval::read_feature_dump(csv);
  CHECK(t.dim == 64);
  CHECK(t.kinds.size() == 8 + 8 + 8);
  CHECK(std::count(t.kinds.begin(), t.kinds.end(), "pseudo") == 8);
}
