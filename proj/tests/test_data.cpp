#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "tsrm/data.hpp"
#include "tsrm/error.hpp"

using namespace tsrm;
namespace fs = std::filesystem;

namespace {

std::string ett_like(std::size_t rows, std::size_t channels) {
  std::ostringstream os;
  os << "date";
  for (std::size_t c = 0; c < channels; ++c) os << ",c" << c;
  os << "\n";
  for (std::size_t r = 0; r < rows; ++r) {
    os << "2016-07-01 " << r;
    for (std::size_t c = 0; c < channels; ++c) os << ',' << std::sin(0.1 * static_cast<double>(r + c)) * 10 + c;
    os << "\n";
  }
  return os.str();
}

}  // namespace

TEST_CASE("parse a toy CSV") {
  std::istringstream in("date,a,b\n2020-01-01,1,2\n2020-01-02,3.5,-4\n\"2020-01-03, noon\",5,6e1\n");
  SeriesDataset ds = parse_csv(in, "toy");
  CHECK(ds.values.shape() == Shape{3, 2});
  CHECK(ds.columns == std::vector<std::string>{"a", "b"});
  CHECK(ds.timestamps[2] == "2020-01-03, noon");
  CHECK(ds.values.at({2, 1}) == 60);
  CHECK(ds.values.at({1, 1}) == -4);
}

TEST_CASE("CSV errors") {
  std::istringstream no_header("2020-01-01,1,2\n2020-01-02,3,4\n");
  CHECK_THROWS_AS(parse_csv(no_header), ParseError);
  std::istringstream empty("");
  CHECK_THROWS_AS(parse_csv(empty), ParseError);
  std::istringstream bad("date,a,b\n2020,1,x\n");
  try {
    parse_csv(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("column 3") != std::string::npos);
  }
  std::istringstream ragged("date,a,b\n2020,1\n");
  CHECK_THROWS_AS(parse_csv(ragged), ParseError);
  std::istringstream wrong_channels(ett_like(5, 3));
  CHECK_THROWS_AS(parse_csv(wrong_channels, "ETTh1"), DataError);
  CHECK_THROWS_AS(load_csv("/nonexistent/ETTh1.csv"), DataError);
}

TEST_CASE("benchmark table") {
  auto etth1 = known_dataset("etth1");
  REQUIRE(etth1);
  CHECK(etth1->channels == 7);
  CHECK(etth1->train == 8545);
  CHECK(etth1->val == 2881);
  CHECK(etth1->test == 2881);
  CHECK(known_dataset("electricity")->channels == 321);
  CHECK(known_dataset("weather")->channels == 21);
  CHECK(known_dataset("exchange_rate")->channels == 8);
  CHECK(known_dataset("ETTm2")->train == 34465);
  CHECK_FALSE(known_dataset("unknown"));
}

TEST_CASE("ETTh1-shaped file gets the benchmark split") {
  std::istringstream in(ett_like(14400, 7));
  SeriesDataset ds = parse_csv(in, "ETTh1");
  CHECK(ds.features() == 7);
  split_and_standardize(ds);
  CHECK(ds.train_end == 8545);
  CHECK(ds.val_end == 8545 + 2881);
  CHECK(ds.length() == 8545 + 2881 + 2881);
  auto [b, e] = ds.bounds(Split::kTest);
  CHECK(b == 11426);
  CHECK(e == 14307);

  std::istringstream short_in(ett_like(1000, 7));
  SeriesDataset small = parse_csv(short_in, "ETTh1");
  CHECK_THROWS_AS(split_and_standardize(small), DataError);
}

TEST_CASE("standardization uses train statistics and inverts") {
  std::istringstream in(ett_like(500, 3));
  SeriesDataset raw = parse_csv(in, "toy");
  SeriesDataset ds = raw;
  split_and_standardize(ds);
  CHECK(ds.train_end == 350);
  CHECK(ds.val_end == 400);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t t = 0; t < ds.train_end; ++t) m += ds.values.at({t, c});
    m /= static_cast<double>(ds.train_end);
    for (std::size_t t = 0; t < ds.train_end; ++t) v += std::pow(ds.values.at({t, c}) - m, 2);
    v /= static_cast<double>(ds.train_end);
    CHECK(std::abs(m) < 1e-8);
    CHECK(std::abs(std::sqrt(v) - 1) < 1e-6);
  }
  Tensor back = destandardize(ds, ds.values);
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - raw.values[i]) < 1e-9);

  // Changing test rows must not move the statistics.
  SeriesDataset leaked = raw;
  for (std::size_t t = 450; t < 500; ++t) leaked.values.at({t, 0}) = 1e6;
  split_and_standardize(leaked);
  CHECK(leaked.mean == ds.mean);
  CHECK(leaked.stdev == ds.stdev);

  std::istringstream flat("date,a\n0,3\n1,3\n2,3\n3,3\n4,3\n5,3\n6,3\n7,3\n8,3\n9,3\n");
  SeriesDataset constant = parse_csv(flat);
  split_and_standardize(constant);
  for (auto v : constant.values.data()) CHECK(v == 0);

  SeriesDataset unscaled = raw;
  SplitSpec keep;
  keep.standardize = false;
  split_and_standardize(unscaled, keep);
  CHECK(unscaled.values == raw.values);
}

TEST_CASE("windows") {
  std::istringstream in(ett_like(300, 2));
  SeriesDataset ds = parse_csv(in, "toy");
  SplitSpec spec;
  spec.train = 200;
  spec.val = 50;
  split_and_standardize(ds, spec);
  auto train = window_starts(ds, Split::kTrain, 96, 96, Task::kForecast);
  CHECK(train.size() == 9);
  for (auto s : train) CHECK(s + 96 + 96 <= ds.train_end);
  CHECK(window_starts(ds, Split::kTrain, 96, 96, Task::kForecast, 200).size() == 1);
  CHECK_THROWS_AS(window_starts(ds, Split::kVal, 96, 96, Task::kForecast), DataError);
  auto val = window_starts(ds, Split::kVal, 20, 10, Task::kForecast);
  for (auto s : val) {
    CHECK(s >= ds.train_end);
    CHECK(s + 30 <= ds.val_end);
  }
  auto test = window_starts(ds, Split::kTest, 24, 24, Task::kImpute);
  CHECK(test.size() == 50 - 24 + 1);

  WindowBatch fb = gather_windows(ds, {0, 5}, 96, 96, Task::kForecast);
  CHECK(fb.inputs.shape() == Shape{2, 96, 2});
  CHECK(fb.targets.shape() == Shape{2, 96, 2});
  CHECK(fb.inputs.at({1, 0, 1}) == ds.values.at({5, 1}));
  CHECK(fb.targets.at({1, 0, 0}) == ds.values.at({101, 0}));

  WindowBatch ib = gather_windows(ds, test, 24, 24, Task::kImpute);
  CHECK(ib.inputs == ib.targets);
}

TEST_CASE("dataset registry") {
  const fs::path dir = fs::temp_directory_path() / "tsrm_registry_test";
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "registry.json");
    out << R"({"datasets": {"ETTh1": {"path": "ETT-small/ETTh1.csv"}, "mine": {"path": "m.csv", "channels": 2,
              "split": [10, 5, 5], "frequency": "1d"}}})";
  }
  auto entries = load_registry(dir / "registry.json");
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].name == "ETTh1");
  CHECK(entries[0].train == 8545);
  CHECK(entries[1].name == "mine");
  CHECK(entries[1].test == 5);
  {
    std::ofstream out(dir / "bad.json");
    out << R"({"datasets": {"x": {"path": "a.csv", "chanels": 2}}})";
  }
  CHECK_THROWS_AS(load_registry(dir / "bad.json"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("synthetic sine is seeded") {
  SineSpec spec;
  spec.length = 500;
  spec.seed = 3;
  SeriesDataset a = synthetic_sine(spec), b = synthetic_sine(spec);
  CHECK(a.values == b.values);
  CHECK(a.values.shape() == Shape{500, 2});
  spec.seed = 4;
  CHECK_FALSE(synthetic_sine(spec).values == a.values);
}
