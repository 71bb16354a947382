#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsrm/tasks.hpp"
#include "tsrm/tensor.hpp"

namespace tsrm {

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split split);
Split split_from_string(const std::string& s);

// Benchmark metadata: channel count and train / val / test row counts.
struct DatasetInfo {
  std::string name;
  std::string path;  // may be relative to the registry or TSRM_DATA_DIR
  std::size_t channels = 0;
  std::size_t train = 0, val = 0, test = 0;
  std::string frequency;
};

// Built-in table for ETTh1/2, ETTm1/2, ECL, Exchange and Weather. Matching is
// case-insensitive and accepts the usual file stems (electricity,
// exchange_rate, weather).
std::optional<DatasetInfo> known_dataset(const std::string& name);

// {"datasets": {"<name>": {"path": ..., "channels": ..., "split": [tr, va, te],
//  "frequency": ...}}}. Unknown keys are rejected.
std::vector<DatasetInfo> load_registry(const std::filesystem::path& file);

struct SeriesDataset {
  std::string name;
  std::vector<std::string> columns;     // feature names, timestamp excluded
  std::vector<std::string> timestamps;  // informational
  Tensor values;                        // [L, F]
  std::string frequency;
  std::size_t train_end = 0, val_end = 0;
  bool standardized = false;
  std::vector<double> mean, stdev;  // per channel, train split only

  std::size_t length() const { return values.empty() ? 0 : values.dim(0); }
  std::size_t features() const { return values.empty() ? 0 : values.dim(1); }
  // [begin, end) rows of a split.
  std::pair<std::size_t, std::size_t> bounds(Split split) const;
};

// Header row required; first column is the timestamp, the rest numeric. When
// `name` (or the file stem) is a known benchmark the channel count is
// validated. Throws ParseError / DataError.
SeriesDataset load_csv(const std::filesystem::path& path, const std::string& name = "");
SeriesDataset parse_csv(std::istream& in, const std::string& name = "");

struct SplitSpec {
  // Explicit row counts; when absent the benchmark table is used, then the
  // fractions below.
  std::optional<std::size_t> train, val, test;
  double train_frac = 0.7, val_frac = 0.1;
  bool standardize = true;
};

// Sets split bounds and z-scores every channel with train statistics.
void split_and_standardize(SeriesDataset& ds, const SplitSpec& spec = {});
// Inverse of the z-score, applied along the last axis.
Tensor destandardize(const SeriesDataset& ds, const Tensor& x);

// Start rows of all windows inside one split.
std::vector<std::size_t> window_starts(const SeriesDataset& ds, Split split, std::size_t lookback,
                                       std::size_t horizon, Task task, std::size_t stride = 1);

struct WindowBatch {
  Tensor inputs;   // [B, T, F]
  Tensor targets;  // [B, H, F]; for imputation the unmasked input
  std::vector<std::size_t> starts;
};

WindowBatch gather_windows(const SeriesDataset& ds, const std::vector<std::size_t>& starts, std::size_t lookback,
                           std::size_t horizon, Task task);

struct SineSpec {
  std::size_t length = 2400;
  std::size_t channels = 2;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

// Channel c: sin(2 pi t / P_c + phase_c) with P_c = 24 * (c + 1) plus a slower
// component, and Gaussian noise.
SeriesDataset synthetic_sine(const SineSpec& spec);

}  // namespace tsrm
