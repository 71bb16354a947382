#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsrm/autodiff.hpp"
#include "tsrm/rng.hpp"

namespace tsrm {

enum class Task { kForecast, kImpute };

std::string to_string(Task task);
Task task_from_string(const std::string& s);

// Value written into masked cells before the model sees them.
inline constexpr real kMaskSentinel = -1;

// Mean over every cell of |e| + e^2, e = yhat - y. Shapes must match.
Var forecast_loss(const Var& yhat, const Var& y);

// Masked / unmasked L1 + L2 terms, each averaged over all cells and scaled by
// 1/rm and 1/(1 - rm). The masked term is then weighted by 1/rm once more
// unless single_rm_weighting is set.
Var imputation_loss(const Var& yhat, const Var& y, const Tensor& mask, double rm, bool single_rm_weighting = false);

struct MaskSet {
  Tensor m;  // [T, F], 1 = masked
  double ratio = 0;
  std::uint64_t seed = 0;

  double realized_ratio() const;
};

// Exactly round(T * F * rm) cells, sampled without replacement.
MaskSet generate_mask(std::size_t length, std::size_t features, double rm, std::uint64_t seed);
// Same sampling for an arbitrary shape; each leading slice [.., T, F] gets its
// own draw so every window hits the ratio exactly.
Tensor sample_mask(const Shape& shape, double rm, Rng& rng);

Tensor apply_mask(const Tensor& x, const Tensor& mask, real sentinel = kMaskSentinel);

struct EvalRecord {
  double mse = 0;
  double mae = 0;
  std::string split = "test";
  std::string setting;  // horizon, ratio or "AVG"
  int epoch = -1;
  std::string config_hash;
  std::size_t count = 0;  // cells that entered the metrics

  static std::string csv_header();
  std::string csv_row() const;
  nlohmann::ordered_json to_json() const;
};

// MSE / MAE over all cells, or only cells with mask != 0.
EvalRecord metrics(const Tensor& yhat, const Tensor& y, const Tensor* mask = nullptr);

// Running sums so metrics can be pooled over many batches.
class MetricAccumulator {
 public:
  void add(const Tensor& yhat, const Tensor& y, const Tensor* mask = nullptr);
  EvalRecord result() const;
  std::size_t count() const { return count_; }

 private:
  double se_ = 0, ae_ = 0;
  double se_c_ = 0, ae_c_ = 0;
  std::size_t count_ = 0;
};

// Unweighted mean of the rows, labelled "AVG".
EvalRecord average(const std::vector<EvalRecord>& rows);

}  // namespace tsrm
