#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsrm/autodiff.hpp"
#include "tsrm/layers.hpp"
#include "tsrm/rng.hpp"

namespace tsrm {

// Full architecture hyperparameter record.
struct ModelConfig {
  std::size_t num_layers = 2;  // N, encoding layers
  std::size_t heads = 4;       // h
  std::size_t d_model = 32;    // d
  // Kernel size / dilation / stride / groups per representation conv. Channel
  // counts are filled in from d_model.
  std::vector<Conv1DSpec> conv_specs;
  AttentionKind attention = AttentionKind::kVanilla;
  bool ifc = false;
  bool merge_trainable = true;
  double dropout = 0.1;
  std::size_t lookback = 96;  // T
  std::size_t horizon = 96;   // H
  std::size_t features = 1;   // F

  // Structural checks always apply; the hyperparameter search ranges
  // (N <= 12, h in {2..32}, d in {8..128}, K in 1..4) are skipped with
  // force_ranges. Throws ConfigError.
  void validate(bool force_ranges = false) const;
  // conv_specs with channels set to d_model.
  std::vector<Conv1DSpec> resolved_specs() const;
  std::size_t num_convs() const { return conv_specs.size(); }
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
// Unknown keys are rejected with ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Kernel layout covering ~3 values with the smallest conv and 50-80% of the
// lookback with the largest; intermediate convs are spaced geometrically.
std::vector<Conv1DSpec> auto_conv_specs(std::size_t lookback, std::size_t count);

// Configuration used for the ETTh1 complexity comparison (T = H = 96, F = 7).
ModelConfig etth1_default_config();

struct EncodingLayer {
  std::vector<Conv1d> repr_convs;
  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  Linear block2;  // d x d, or (F*d) x (F*d) in IFC mode
  std::vector<ConvTranspose1d> merge_convs;
  Linear merge_proj;  // (d*K) x d

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> merge_parameters();
};

struct MiddleOutput {
  Var out;           // [n, D, d]
  Tensor attention;  // [n, h, D, D]
};

struct LayerOutput {
  Var embedded;      // E_out, [n, T, d]
  Var residual;      // [n, D, d]
  Tensor attention;  // [n, h, D, D]
};

struct ForwardOptions {
  bool training = false;
  bool capture_attention = false;
  const Tensor* mask = nullptr;  // [B, T, F], nonzero = masked cell
  Rng* rng = nullptr;            // required when training with dropout > 0
};

struct ForwardResult {
  Var output;  // [B, H, F]
  // Per encoding layer, [B*F, h, D, D] with row index b*F + f. Empty unless
  // capture_attention was set.
  std::vector<Tensor> attention;
  bool attention_captured = false;
  RevINStats revin;
};

class TsrmModel {
 public:
  TsrmModel() = default;
  TsrmModel(ModelConfig cfg, bool force_ranges = false);

  void init(Rng& rng);
  const ModelConfig& config() const { return config_; }

  // x: [B, T, F] or [T, F]; output keeps the same batch convention.
  ForwardResult forward(Tape& tape, const Tensor& x, const ForwardOptions& opts);

  // Building blocks, exposed for testing and explainability. Inputs carry a
  // leading row axis n = B * F.
  Var representation_layer(Tape& tape, EncodingLayer& layer, const Var& embedded);
  MiddleOutput middle_blocks(Tape& tape, EncodingLayer& layer, const Var& repr, bool training, Rng* rng);
  Var merge_layer(Tape& tape, EncodingLayer& layer, const Var& repr);
  // prev_residual may be an invalid Var, meaning zeros.
  LayerOutput encoding_layer(Tape& tape, EncodingLayer& layer, const Var& embedded, const Var& prev_residual,
                             bool training, Rng* rng);

  std::vector<std::size_t> split_sizes() const;
  std::size_t representation_len() const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t count_parameters() const;
  void zero_grad();

  Linear embedding;
  RevIN revin;
  std::vector<EncodingLayer> layers;
  Linear head;

 private:
  ModelConfig config_;
  Tensor pos_encoding_;
};

std::size_t count_parameters(const TsrmModel& model);

// FNV-1a of the canonical JSON dump; stable across runs.
std::uint64_t config_hash(const nlohmann::ordered_json& j);
std::string hex_hash(std::uint64_t h);

}  // namespace tsrm
