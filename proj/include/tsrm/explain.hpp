#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "tsrm/model.hpp"

namespace tsrm {

// Attention of one instance: [layer][feature] -> [h, D, D].
using AttentionSet = std::vector<std::vector<Tensor>>;

// Splits the captured [B*F, h, D, D] maps of batch item `item`. Throws
// ContractError if the forward pass did not capture attention.
AttentionSet collect_attention(const ForwardResult& result, std::size_t features, std::size_t item = 0);

// Mean over heads and queries: [h, D, D] -> [D].
Tensor key_importance(const Tensor& weights);
// One head's [D, D] map -> [D].
Tensor key_importance(const Tensor& weights, std::size_t head);

// Maps per-key scores back to the input timeline: block j goes through a
// transposed conv with fixed weights 1/s_j and the K results are summed.
// Positions past a block's natural length stay zero.
Tensor backmap_importance(const Tensor& importance, const std::vector<Conv1DSpec>& specs, std::size_t lookback);
Tensor backmap_attention(const Tensor& weights, const std::vector<Conv1DSpec>& specs, std::size_t lookback);

// (x - min) / (max - min); a constant input maps to zeros.
Tensor minmax(const Tensor& x);

struct FeatureReport {
  std::size_t feature = 0;
  std::string name;
  std::vector<double> values;                 // input window, optional
  std::vector<Tensor> raw;                    // per layer, back-mapped [T]
  std::vector<Tensor> layers;                 // per layer, normalized [T]
  std::vector<std::vector<Tensor>> heads;     // per layer, per head, normalized [T] (optional)
  Tensor combined;                            // minmax of the summed normalized maps
  std::vector<std::size_t> highlights;        // combined >= threshold
};

struct AttentionReport {
  double threshold = 0.85;
  std::size_t lookback = 0;
  std::size_t num_layers = 0;
  Shape raw_shape;  // [h, D, D]
  std::size_t window_start = 0;
  std::vector<FeatureReport> features;
};

// Normalizes each timeline, sums, re-normalizes and thresholds.
FeatureReport build_feature_report(const std::vector<Tensor>& timelines, double threshold);

struct ExplainOptions {
  double threshold = 0.85;
  bool per_head = false;
  const Tensor* mask = nullptr;  // [T, F], imputation windows
  std::vector<std::string> feature_names;
  std::size_t window_start = 0;
};

// Runs one forward pass on x [T, F] with capture enabled and builds the report.
// Model parameters are not modified.
AttentionReport explain_window(TsrmModel& model, const Tensor& x, const ExplainOptions& opts = {});

nlohmann::ordered_json to_json(const AttentionReport& report);
// Flat table for one feature: t,value,score_EL0..,combined,highlighted.
std::string to_csv(const AttentionReport& report, std::size_t feature);

}  // namespace tsrm
