#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsrm/data.hpp"
#include "tsrm/model.hpp"
#include "tsrm/tasks.hpp"

namespace tsrm {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::size_t eval_batch_size = 64;
  std::size_t max_epochs = 20;
  double early_stop_threshold = 0.01;  // relative val-MSE improvement
  std::size_t early_stop_patience = 3;
  std::size_t plateau_patience = 2;
  double plateau_factor = 0.1;
  double plateau_threshold = 1e-4;  // relative
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 0;  // 0 disables clipping
  std::uint64_t seed = 0;
  double missing_ratio = 0.25;  // imputation only
  bool single_rm_weighting = false;
  std::size_t window_stride = 1;
  std::size_t max_train_windows = 0;  // per epoch, 0 = all
  std::size_t max_eval_windows = 0;   // evenly strided subset, 0 = all

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Bias-corrected Adam over the trainable parameters it was built with.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Throws ContractError when a trainable parameter has no gradient.
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// Global L2 norm of all gradients; rescales them to max_norm when above it.
// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm);
double grad_norm(const std::vector<Parameter*>& params);

// Decays the rate once `patience` consecutive epochs fail to improve on the
// best value by the relative threshold, then restarts the count.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience, double factor, double threshold = 1e-4);

  double step(double val);
  double lr() const { return lr_; }
  std::size_t bad_epochs() const { return bad_; }
  std::size_t decays() const { return decays_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_, threshold_;
  double best_;
  std::size_t bad_ = 0, decays_ = 0;
};

// Improvement means val < best * (1 - threshold). NaN never improves.
class EarlyStopper {
 public:
  EarlyStopper(double threshold, std::size_t patience);

  // True once `patience` epochs in a row have passed without improvement.
  bool step(double val);
  double best() const { return best_; }
  std::size_t since_improvement() const { return since_; }
  bool saw_non_finite() const { return non_finite_; }

 private:
  double threshold_;
  std::size_t patience_;
  double best_;
  std::size_t since_ = 0;
  bool non_finite_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_mse = 0;
  double val_mae = 0;
  double lr = 0;
  double seconds = 0;
};

struct History {
  std::vector<EpochRecord> epochs;

  // Columns epoch,train_loss,val_mse,val_mae,lr,seconds. The timing column
  // is the only non-deterministic field and can be left out.
  std::string to_csv(bool with_seconds = true) const;
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  History history;
  std::size_t best_epoch = 0;
  double best_val_mse = 0;
  bool stopped_early = false;
  bool non_finite_val = false;
  std::vector<Tensor> best_params;  // parameter values in model.parameters() order
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place and leaves the best-validation parameters loaded.
TrainResult train(TsrmModel& model, const SeriesDataset& ds, Task task, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

struct EvalOptions {
  std::size_t horizon = 0;  // forecast target length, 0 = model horizon
  double missing_ratio = 0.25;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
  std::size_t stride = 1;
  std::size_t max_windows = 0;
};

EvalOptions eval_options(const TrainConfig& cfg);

// Validation / test metrics. Imputation masks are a fixed function of
// (seed, window start, ratio) so every evaluation sees the same cells.
EvalRecord evaluate(TsrmModel& model, const SeriesDataset& ds, Split split, Task task, const EvalOptions& opts);

// Deterministic mask used for evaluation windows.
Tensor window_mask(std::size_t start, std::size_t lookback, std::size_t features, double rm, std::uint64_t seed);

// Naive references used by the acceptance checks.
EvalRecord last_value_baseline(const SeriesDataset& ds, Split split, std::size_t lookback, std::size_t horizon,
                               std::size_t stride = 1);
EvalRecord mean_fill_baseline(const SeriesDataset& ds, Split split, std::size_t lookback, double rm,
                              std::uint64_t seed, std::size_t stride = 1);

void load_parameter_values(TsrmModel& model, const std::vector<Tensor>& values);
std::vector<Tensor> parameter_values(const TsrmModel& model);

}  // namespace tsrm
