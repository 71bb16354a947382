#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsrm/data.hpp"
#include "tsrm/model.hpp"
#include "tsrm/tasks.hpp"
#include "tsrm/training.hpp"

namespace tsrm {

// Stable process exit codes.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitNumeric = 3, kExitInternal = 4 };

struct DataRef {
  std::string name;      // benchmark name or label
  std::string path;      // CSV file
  std::string registry;  // optional registry JSON
  std::optional<SineSpec> synthetic;
  SplitSpec split;
};

// Everything one run needs. Key schema (unknown keys are rejected):
//   {"task": "forecast" | "impute", "seed": u64, "out": dir,
//    "model": {...}, "train": {...},
//    "data": {"name", "path", "registry", "standardize",
//             "synthetic": {"length", "channels", "noise", "seed"},
//             "split": {"train", "val", "test"} | {"train_frac", "val_frac"}},
//    "horizons": [H...], "ratios": [r_m...]}
// Forecast runs must set model.horizon; imputation runs use H = T.
struct RunConfig {
  Task task = Task::kForecast;
  ModelConfig model;
  TrainConfig train;
  DataRef data;
  std::vector<std::size_t> horizons;  // eval settings, informational
  std::vector<double> ratios;         // eval missing ratios
  std::string out = "runs/default";
  std::uint64_t seed = 0;
  bool features_given = false;
  std::filesystem::path base_dir;  // relative paths resolve here, not serialized
};

// Validates the model config against the hyperparameter ranges unless
// force_ranges is set.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {},
                               bool force_ranges = false);
RunConfig load_run_config(const std::filesystem::path& file, bool force_ranges = false);
// Resolved snapshot: absolute paths, explicit features and seed.
nlohmann::ordered_json to_json(const RunConfig& cfg);

// Locates the CSV (config dir, then TSRM_DATA_DIR), loads and splits it, and
// fills model.features when the config left it out.
SeriesDataset load_dataset(RunConfig& cfg);

struct RunSummary {
  std::filesystem::path checkpoint;
  TrainResult result;
  EvalRecord test;
  std::size_t parameters = 0;
  std::size_t trainable = 0;
};

// Trains, evaluates on the test split and writes checkpoint.tsrm,
// history.csv and resolved_config.json into out_dir.
RunSummary run_training(RunConfig cfg, const SeriesDataset& ds, const std::filesystem::path& out_dir,
                        bool verbose);

// Ablation variants derived from a base config.
struct AblationRun {
  std::string variant;
  RunConfig config;
};
std::vector<AblationRun> ablation_runs(const RunConfig& base, const std::string& variant);

// Entry point behind the tsrm binary. Catches library errors and maps them
// onto ExitCode values, writing messages to stderr.
int run_cli(int argc, const char* const* argv);

}  // namespace tsrm
