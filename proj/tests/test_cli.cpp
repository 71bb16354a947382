#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "doctest.h"
#include "tsrm/checkpoint.hpp"
#include "tsrm/cli.hpp"
#include "tsrm/error.hpp"

using namespace tsrm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("tsrm_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

// Silences stdout / stderr of an in-process CLI call.
struct Quiet {
  std::ostringstream out, err;
  std::streambuf* old_out;
  std::streambuf* old_err;
  Quiet() : old_out(std::cout.rdbuf(out.rdbuf())), old_err(std::cerr.rdbuf(err.rdbuf())) {}
  ~Quiet() {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
  }
};

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tsrm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  Quiet q;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data());
  return {code, q.out.str(), q.err.str()};
}

json toy_config() {
  return json::parse(R"({
    "task": "forecast",
    "seed": 3,
    "model": {"num_layers": 1, "heads": 2, "d_model": 8, "lookback": 24, "horizon": 12,
              "conv_specs": [{"kernel_size": 3}, {"kernel_size": 4, "dilation": 2}]},
    "train": {"max_epochs": 2, "batch_size": 16, "max_train_windows": 48, "max_eval_windows": 24},
    "data": {"synthetic": {"length": 400, "channels": 2, "noise": 0.1, "seed": 1}}
  })");
}

fs::path write_json(const fs::path& dir, const std::string& name, const json& j) {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<std::string>> read_csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("run config parsing and round trip") {
  RunConfig cfg = run_config_from_json(toy_config());
  CHECK(cfg.task == Task::kForecast);
  CHECK(cfg.seed == 3);
  CHECK(cfg.train.seed == 3);
  CHECK(cfg.model.horizon == 12);
  RunConfig again = run_config_from_json(to_json(cfg));
  CHECK(to_json(again).dump() == to_json(cfg).dump());

  json bad = toy_config();
  bad["model"]["bogus"] = 1;
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
  bad = toy_config();
  bad["data"]["extra"] = true;
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
  bad = toy_config();
  bad["model"].erase("horizon");
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);

  json imp = toy_config();
  imp["task"] = "impute";
  imp["model"].erase("horizon");
  imp["ratios"] = {0.125, 0.25};
  RunConfig ic = run_config_from_json(imp);
  CHECK(ic.model.horizon == ic.model.lookback);
  imp["model"]["horizon"] = 5;
  CHECK_THROWS_AS(run_config_from_json(imp), ConfigError);

  json deep = toy_config();
  deep["model"]["num_layers"] = 13;
  CHECK_THROWS_AS(run_config_from_json(deep), ConfigError);
  CHECK(run_config_from_json(deep, {}, true).model.num_layers == 13);
}

TEST_CASE("train writes artifacts and eval reproduces the best validation MSE") {
  TempDir dir;
  const fs::path cfg = write_json(dir.path, "toy.json", toy_config());
  const fs::path out = dir.path / "run";
  auto r = cli({"train", "--config", cfg.string(), "--out", out.string()});
  REQUIRE(r.code == 0);
  CHECK(r.err.empty());
  CHECK(fs::exists(out / "checkpoint.tsrm"));
  CHECK(fs::exists(out / "history.csv"));
  CHECK(fs::exists(out / "resolved_config.json"));

  // The snapshot alone reproduces the run.
  const fs::path out2 = dir.path / "rerun";
  auto r2 = cli({"train", "--config", (out / "resolved_config.json").string(), "--out", out2.string()});
  REQUIRE(r2.code == 0);
  CHECK(slurp(out / "history.csv") == slurp(out2 / "history.csv"));
  CHECK(slurp(out / "checkpoint.tsrm") == slurp(out2 / "checkpoint.tsrm"));

  Checkpoint ck = read_checkpoint(out / "checkpoint.tsrm");
  const double best = ck.meta.at("best_val_mse").get<double>();
  auto e = cli({"eval", "--checkpoint", (out / "checkpoint.tsrm").string(), "--split", "val", "--out",
                (dir.path / "ev").string()});
  REQUIRE(e.code == 0);
  auto rows = read_csv_rows(slurp(dir.path / "ev" / "eval.csv"));
  REQUIRE(rows.size() == 2);
  CHECK(rows[1][0] == "val");
  CHECK(std::abs(std::stod(rows[1][3]) - best) < 1e-9);
  json ej = json::parse(slurp(dir.path / "ev" / "eval.json"));
  CHECK(ej.size() == 1);

  auto seeded = cli({"train", "--config", cfg.string(), "--out", (dir.path / "s9").string(), "--seed", "9"});
  REQUIRE(seeded.code == 0);
  CHECK(json::parse(slurp(dir.path / "s9" / "resolved_config.json"))["seed"] == 9);
  CHECK(slurp(out / "history.csv") != slurp(dir.path / "s9" / "history.csv"));
}

TEST_CASE("exit codes") {
  TempDir dir;
  json missing = toy_config();
  missing["data"] = {{"path", "does_not_exist.csv"}};
  CHECK(cli({"train", "--config", write_json(dir.path, "m.json", missing).string(), "--out",
             (dir.path / "o").string()})
            .code == kExitData);

  json deep = toy_config();
  deep["model"]["num_layers"] = 13;
  auto r = cli({"train", "--config", write_json(dir.path, "d.json", deep).string(), "--out", (dir.path / "o").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("[0, 12]") != std::string::npos);

  CHECK(cli({"train", "--config", (dir.path / "nope.json").string()}).code == kExitConfig);
  CHECK(cli({"frobnicate"}).code == kExitConfig);
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"--help"}).code == kExitOk);

  std::ofstream(dir.path / "broken.csv") << "date,a,b\n2020-01-01,1,2\n2020-01-02,x,3\n";
  json broken = toy_config();
  broken["data"] = {{"path", "broken.csv"}};
  CHECK(cli({"train", "--config", write_json(dir.path, "b.json", broken).string()}).code == kExitData);

  json nan = toy_config();
  nan["train"]["lr"] = 1e12;
  nan["train"]["max_epochs"] = 4;
  auto n = cli({"train", "--config", write_json(dir.path, "n.json", nan).string(), "--out", (dir.path / "n").string()});
  CHECK((n.code == kExitNumeric || n.code == kExitOk));
}

TEST_CASE("dataset lookup falls back to TSRM_DATA_DIR") {
  TempDir cfg_dir, data_dir;
  {
    std::ofstream csv(data_dir.path / "tiny.csv");
    csv << "date,x,y\n";
    for (int t = 0; t < 300; ++t) csv << "t" << t << ',' << std::sin(t * 0.3) << ',' << std::cos(t * 0.2) << "\n";
  }
  json c = toy_config();
  c["data"] = {{"path", "tiny.csv"}};
  const fs::path p = write_json(cfg_dir.path, "c.json", c);
  ::unsetenv("TSRM_DATA_DIR");
  CHECK(cli({"count-params", "--config", p.string()}).code == kExitData);
  RunConfig rc = load_run_config(p);
  CHECK_THROWS_AS(load_dataset(rc), DataError);
  ::setenv("TSRM_DATA_DIR", data_dir.path.c_str(), 1);
  RunConfig ok = load_run_config(p);
  SeriesDataset ds = load_dataset(ok);
  CHECK(ds.features() == 2);
  CHECK(ok.model.features == 2);
  CHECK(fs::path(ok.data.path).is_absolute());
  ::unsetenv("TSRM_DATA_DIR");
}

TEST_CASE("eval emits one row per horizon plus AVG") {
  TempDir dir;
  std::vector<std::string> args = {"eval"};
  for (std::size_t h : {96, 192, 336, 720}) {
    json c = toy_config();
    c["model"] = {{"num_layers", 0}, {"heads", 2}, {"d_model", 8}, {"lookback", 96}, {"horizon", h},
                  {"conv_specs", json::array({{{"kernel_size", 4}}})}};
    c["train"] = {{"max_epochs", 1}, {"batch_size", 8}, {"max_train_windows", 8}, {"max_eval_windows", 4}};
    c["data"] = {{"synthetic", {{"length", 2700}, {"channels", 2}, {"seed", 1}}},
                 {"split", {{"train", 900}, {"val", 900}, {"test", 900}}}};
    const fs::path out = dir.path / ("h" + std::to_string(h));
    REQUIRE(cli({"train", "--config", write_json(dir.path, "h.json", c).string(), "--out", out.string()}).code == 0);
    args.push_back("--checkpoint");
    args.push_back((out / "checkpoint.tsrm").string());
  }
  args.push_back("--out");
  args.push_back((dir.path / "ev").string());
  REQUIRE(cli(args).code == 0);
  auto rows = read_csv_rows(slurp(dir.path / "ev" / "eval.csv"));
  REQUIRE(rows.size() == 6);
  CHECK(rows[1][1] == "96");
  CHECK(rows[4][1] == "720");
  CHECK(rows[5][1] == "AVG");
  double mean = 0;
  for (int i = 1; i <= 4; ++i) mean += std::stod(rows[i][3]) / 4;
  CHECK(std::stod(rows[5][3]) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("eval emits one row per missing ratio plus AVG") {
  TempDir dir;
  json c = toy_config();
  c["task"] = "impute";
  c["model"].erase("horizon");
  c["ratios"] = {0.125, 0.25, 0.375, 0.5};
  const fs::path out = dir.path / "imp";
  REQUIRE(cli({"train", "--config", write_json(dir.path, "i.json", c).string(), "--out", out.string()}).code == 0);
  REQUIRE(cli({"eval", "--checkpoint", (out / "checkpoint.tsrm").string(), "--out", (dir.path / "ev").string()})
              .code == 0);
  auto rows = read_csv_rows(slurp(dir.path / "ev" / "eval.csv"));
  REQUIRE(rows.size() == 6);
  CHECK(rows[1][1] == "0.125");
  CHECK(rows[4][1] == "0.5");
  CHECK(rows[5][1] == "AVG");

  REQUIRE(cli({"eval", "--checkpoint", (out / "checkpoint.tsrm").string(), "--ratios", "0.3", "--out",
               (dir.path / "ev2").string()})
              .code == 0);
  CHECK(read_csv_rows(slurp(dir.path / "ev2" / "eval.csv")).size() == 2);

  // A config whose model differs from the checkpoint is rejected.
  const fs::path other = write_json(dir.path, "f.json", toy_config());
  CHECK(cli({"eval", "--checkpoint", (out / "checkpoint.tsrm").string(), "--config", other.string()}).code ==
        kExitConfig);
}

TEST_CASE("explain writes per-layer maps and is deterministic") {
  TempDir dir;
  json c = toy_config();
  c["model"]["num_layers"] = 2;
  const fs::path out = dir.path / "run";
  REQUIRE(cli({"train", "--config", write_json(dir.path, "c.json", c).string(), "--out", out.string()}).code == 0);
  const std::string ckpt = (out / "checkpoint.tsrm").string();
  REQUIRE(cli({"explain", "--checkpoint", ckpt, "--window", "3", "--out", (dir.path / "e1").string()}).code == 0);
  REQUIRE(cli({"explain", "--checkpoint", ckpt, "--window", "3", "--out", (dir.path / "e2").string()}).code == 0);
  json j = json::parse(slurp(dir.path / "e1" / "explain.json"));
  CHECK(j["threshold"] == 0.85);
  CHECK(j["num_layers"] == 2);
  REQUIRE(j["features"].size() == 2);
  CHECK(j["features"][0]["layers"].size() == 2);
  CHECK(j["features"][0]["combined"].size() == 24);
  for (const auto& entry : fs::directory_iterator(dir.path / "e1")) {
    CHECK(slurp(entry.path()) == slurp(dir.path / "e2" / entry.path().filename()));
  }
  REQUIRE(cli({"explain", "--checkpoint", ckpt, "--threshold", "0", "--out", (dir.path / "e0").string()}).code == 0);
  json j0 = json::parse(slurp(dir.path / "e0" / "explain.json"));
  CHECK(j0["features"][0]["highlights"].size() == 24);

  CHECK(cli({"explain", "--checkpoint", ckpt, "--window", "100000"}).code == kExitConfig);
  CHECK(cli({"explain", "--checkpoint", ckpt, "--threshold", "1.5"}).code == kExitConfig);
}

TEST_CASE("ablation variants") {
  RunConfig base = run_config_from_json(toy_config());
  auto sweep = ablation_runs(base, "n_sweep");
  REQUIRE(sweep.size() == 9);
  for (std::size_t n = 0; n < 9; ++n) CHECK(sweep[n].config.model.num_layers == n);
  auto r0 = ablation_runs(base, "R0");
  REQUIRE(r0.size() == 1);
  CHECK(r0[0].config.model.conv_specs.size() == 1);
  CHECK(r0[0].config.model.conv_specs[0].kernel_size == 1);
  auto r1 = ablation_runs(base, "R1");
  CHECK(r1[0].config.model.conv_specs[0].kernel_size == 3);
  CHECK(r1[0].config.model.conv_specs[0].dilation == 1);
  CHECK_THROWS_AS(ablation_runs(base, "R7"), ConfigError);

  TempDir dir;
  const fs::path cfg = write_json(dir.path, "c.json", toy_config());
  REQUIRE(cli({"ablate", "--config", cfg.string(), "--variant", "n_sweep", "--out", (dir.path / "sweep").string(),
               "--jobs", "2"})
              .code == 0);
  CHECK(read_csv_rows(slurp(dir.path / "sweep" / "ablation.csv")).size() == 10);

  REQUIRE(cli({"ablate", "--config", cfg.string(), "--variant", "no_merge", "--variant", "R0", "--out",
               (dir.path / "ab").string()})
              .code == 0);
  auto rows = read_csv_rows(slurp(dir.path / "ab" / "ablation.csv"));
  REQUIRE(rows.size() == 4);
  CHECK(rows[1][0] == "base");
  CHECK(rows[2][0] == "no_merge");
  CHECK(std::stoul(rows[2][5]) < std::stoul(rows[1][5]));
  json r0cfg = json::parse(slurp(dir.path / "ab" / "R0" / "resolved_config.json"));
  CHECK(r0cfg["model"]["conv_specs"][0]["kernel_size"] == 1);
}

TEST_CASE("count-params") {
  TempDir dir;
  const fs::path cfg = write_json(dir.path, "c.json", toy_config());
  auto r = cli({"count-params", "--config", cfg.string()});
  REQUIRE(r.code == 0);
  json j = json::parse(r.out);
  CHECK(j["parameters"] == j["trainable_parameters"]);
  CHECK(j["by_component"].contains("head"));
}
