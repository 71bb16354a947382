#include "tsrm/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "tsrm/error.hpp"
#include "tsrm/rng.hpp"

namespace tsrm {

namespace fs = std::filesystem;

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val" || s == "validation") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

std::optional<DatasetInfo> known_dataset(const std::string& name) {
  const std::string key = lower(name);
  auto ett = [&](const std::string& n, bool minute) {
    return minute ? DatasetInfo{n, "", 7, 34465, 11521, 11521, "15min"} : DatasetInfo{n, "", 7, 8545, 2881, 2881, "1h"};
  };
  if (key == "etth1") return ett("ETTh1", false);
  if (key == "etth2") return ett("ETTh2", false);
  if (key == "ettm1") return ett("ETTm1", true);
  if (key == "ettm2") return ett("ETTm2", true);
  if (key == "ecl" || key == "electricity") return DatasetInfo{"ECL", "", 321, 18317, 2633, 5261, "1h"};
  if (key == "exchange" || key == "exchange_rate") return DatasetInfo{"Exchange", "", 8, 5120, 665, 1422, "1d"};
  if (key == "weather") return DatasetInfo{"Weather", "", 21, 36792, 5271, 10540, "10min"};
  return std::nullopt;
}

std::vector<DatasetInfo> load_registry(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open dataset registry " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("registry " + file.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("datasets") || j.size() != 1) {
    throw ConfigError("registry must be an object with a single 'datasets' key");
  }
  std::vector<DatasetInfo> out;
  for (auto it = j["datasets"].begin(); it != j["datasets"].end(); ++it) {
    DatasetInfo info;
    info.name = it.key();
    if (auto known = known_dataset(it.key())) info = *known;
    const auto& e = it.value();
    for (auto f = e.begin(); f != e.end(); ++f) {
      const std::string& k = f.key();
      try {
        if (k == "path") {
          info.path = f->get<std::string>();
        } else if (k == "channels") {
          info.channels = f->get<std::size_t>();
        } else if (k == "frequency") {
          info.frequency = f->get<std::string>();
        } else if (k == "split") {
          auto v = f->get<std::vector<std::size_t>>();
          if (v.size() != 3) throw ConfigError("split needs three row counts");
          info.train = v[0];
          info.val = v[1];
          info.test = v[2];
        } else {
          throw ConfigError("unknown key '" + k + "' in registry entry " + it.key());
        }
      } catch (const nlohmann::json::exception& ex) {
        throw ConfigError("registry entry " + it.key() + "." + k + ": " + ex.what());
      }
    }
    out.push_back(info);
  }
  return out;
}

std::pair<std::size_t, std::size_t> SeriesDataset::bounds(Split split) const {
  if (val_end == 0) throw ContractError("dataset '" + name + "' has no split bounds yet");
  switch (split) {
    case Split::kTrain: return {0, train_end};
    case Split::kVal: return {train_end, val_end};
    default: return {val_end, length()};
  }
}

namespace {

// RFC-4180 record splitter; quoted fields may contain commas and doubled quotes.
std::vector<std::string> split_record(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw ParseError("row " + std::to_string(row) + ": unterminated quoted field");
  out.push_back(std::move(cur));
  return out;
}

bool parse_number(const std::string& s, double& out) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  if (b == e) return false;
  const char* first = s.data() + b;
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + e, out);
  return ec == std::errc() && ptr == s.data() + e;
}

}  // namespace

SeriesDataset parse_csv(std::istream& in, const std::string& name) {
  SeriesDataset ds;
  ds.name = name;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty CSV: missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = split_record(line, 1);
  if (header.size() < 2) throw ParseError("header needs a timestamp column and at least one feature");
  double probe = 0;
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (parse_number(header[c], probe)) throw ParseError("missing header row (found numeric field '" + header[c] + "')");
  }
  ds.columns.assign(header.begin() + 1, header.end());
  const std::size_t f = ds.columns.size();
  std::vector<real> values;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto cells = split_record(line, row);
    if (cells.size() != header.size()) {
      throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                       " columns, found " + std::to_string(cells.size()));
    }
    ds.timestamps.push_back(cells[0]);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      double v = 0;
      if (!parse_number(cells[c], v) || !std::isfinite(v)) {
        throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(c + 1) + " ('" + header[c] +
                         "'): non-numeric value '" + cells[c] + "'");
      }
      values.push_back(static_cast<real>(v));
    }
  }
  if (ds.timestamps.empty()) throw DataError("CSV has a header but no data rows");
  ds.values = Tensor({ds.timestamps.size(), f}, std::move(values));
  if (auto info = known_dataset(name)) {
    ds.name = info->name;
    ds.frequency = info->frequency;
    if (info->channels != f) {
      throw DataError("dataset " + info->name + " should have " + std::to_string(info->channels) +
                      " feature columns, found " + std::to_string(f));
    }
  }
  return ds;
}

SeriesDataset load_csv(const fs::path& path, const std::string& name) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());
  return parse_csv(in, name.empty() ? path.stem().string() : name);
}

void split_and_standardize(SeriesDataset& ds, const SplitSpec& spec) {
  const std::size_t total = ds.length();
  std::size_t train = 0, val = 0, test = 0;
  const auto info = known_dataset(ds.name);
  if (spec.train && spec.val) {
    train = *spec.train;
    val = *spec.val;
    test = spec.test.value_or(total > train + val ? total - train - val : 0);
  } else if (info) {
    train = info->train;
    val = info->val;
    test = info->test;
  } else {
    if (!(spec.train_frac > 0 && spec.val_frac > 0 && spec.train_frac + spec.val_frac < 1)) {
      throw ConfigError("split fractions must be positive and sum below 1");
    }
    train = static_cast<std::size_t>(std::floor(spec.train_frac * static_cast<double>(total)));
    val = static_cast<std::size_t>(std::floor(spec.val_frac * static_cast<double>(total)));
    test = total - train - val;
  }
  if (train == 0 || val == 0 || test == 0 || train + val + test > total) {
    throw DataError("split " + std::to_string(train) + " / " + std::to_string(val) + " / " + std::to_string(test) +
                    " does not fit " + std::to_string(total) + " rows of " + ds.name);
  }
  ds.train_end = train;
  ds.val_end = train + val;
  // Rows past the declared test size are dropped so the test split matches it.
  if (train + val + test < total) {
    std::vector<real> kept(ds.values.data().begin(),
                           ds.values.data().begin() + static_cast<std::ptrdiff_t>((train + val + test) * ds.features()));
    ds.values = Tensor({train + val + test, ds.features()}, std::move(kept));
    if (ds.timestamps.size() > train + val + test) ds.timestamps.resize(train + val + test);
  }

  const std::size_t f = ds.features();
  ds.mean.assign(f, 0.0);
  ds.stdev.assign(f, 1.0);
  ds.standardized = spec.standardize;
  if (!spec.standardize) return;
  for (std::size_t c = 0; c < f; ++c) {
    double m = 0;
    for (std::size_t t = 0; t < train; ++t) m += ds.values[t * f + c];
    m /= static_cast<double>(train);
    double v = 0;
    for (std::size_t t = 0; t < train; ++t) {
      const double e = ds.values[t * f + c] - m;
      v += e * e;
    }
    double sd = std::sqrt(v / static_cast<double>(train));
    if (sd < 1e-8) sd = 1.0;
    ds.mean[c] = m;
    ds.stdev[c] = sd;
  }
  for (std::size_t t = 0; t < ds.length(); ++t) {
    for (std::size_t c = 0; c < f; ++c) {
      ds.values[t * f + c] = static_cast<real>((ds.values[t * f + c] - ds.mean[c]) / ds.stdev[c]);
    }
  }
}

Tensor destandardize(const SeriesDataset& ds, const Tensor& x) {
  const std::size_t f = ds.features();
  if (x.shape().back() != f) throw DimensionError("destandardize expects last axis " + std::to_string(f));
  Tensor out = x;
  if (!ds.standardized) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = i % f;
    out[i] = static_cast<real>(out[i] * ds.stdev[c] + ds.mean[c]);
  }
  return out;
}

std::vector<std::size_t> window_starts(const SeriesDataset& ds, Split split, std::size_t lookback,
                                       std::size_t horizon, Task task, std::size_t stride) {
  if (stride == 0) throw ConfigError("window stride must be positive");
  const auto [begin, end] = ds.bounds(split);
  const std::size_t span = task == Task::kForecast ? lookback + horizon : lookback;
  if (end - begin < span) {
    throw DataError(to_string(split) + " split of " + ds.name + " has " + std::to_string(end - begin) +
                    " rows, fewer than the " + std::to_string(span) + " a window needs");
  }
  std::vector<std::size_t> starts;
  for (std::size_t s = begin; s + span <= end; s += stride) starts.push_back(s);
  return starts;
}

WindowBatch gather_windows(const SeriesDataset& ds, const std::vector<std::size_t>& starts, std::size_t lookback,
                           std::size_t horizon, Task task) {
  const std::size_t f = ds.features(), b = starts.size();
  const std::size_t out_len = task == Task::kForecast ? horizon : lookback;
  WindowBatch batch{Tensor({b, lookback, f}), Tensor({b, out_len, f}), starts};
  const real* src = ds.values.ptr();
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t s = starts[i];
    const std::size_t target_start = task == Task::kForecast ? s + lookback : s;
    if (target_start + out_len > ds.length()) throw DataError("window at row " + std::to_string(s) + " overruns data");
    std::copy_n(src + s * f, lookback * f, batch.inputs.ptr() + i * lookback * f);
    std::copy_n(src + target_start * f, out_len * f, batch.targets.ptr() + i * out_len * f);
  }
  return batch;
}

SeriesDataset synthetic_sine(const SineSpec& spec) {
  if (spec.length == 0 || spec.channels == 0) throw ConfigError("synthetic series needs positive size");
  Rng rng(spec.seed);
  SeriesDataset ds;
  ds.name = "sine";
  ds.frequency = "1h";
  const std::size_t f = spec.channels;
  std::vector<double> phase(f), slow_phase(f);
  for (std::size_t c = 0; c < f; ++c) {
    ds.columns.push_back("s" + std::to_string(c));
    phase[c] = rng.uniform(0, 2 * std::numbers::pi);
    slow_phase[c] = rng.uniform(0, 2 * std::numbers::pi);
  }
  ds.values = Tensor({spec.length, f});
  for (std::size_t t = 0; t < spec.length; ++t) {
    ds.timestamps.push_back(std::to_string(t));
    for (std::size_t c = 0; c < f; ++c) {
      const double period = 24.0 * static_cast<double>(c + 1);
      const double tt = static_cast<double>(t);
      const double v = std::sin(2 * std::numbers::pi * tt / period + phase[c]) +
                       0.5 * std::sin(2 * std::numbers::pi * tt / (7.0 * period) + slow_phase[c]) +
                       rng.normal(0, spec.noise);
      ds.values[t * f + c] = static_cast<real>(v);
    }
  }
  return ds;
}

}  // namespace tsrm
