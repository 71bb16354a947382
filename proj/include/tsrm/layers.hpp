#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsrm/autodiff.hpp"
#include "tsrm/rng.hpp"

namespace tsrm {

// One Conv1D of the representation layer (and its transposed twin in the
// merge layer). stride == 0 means "equal to kernel_size".
struct Conv1DSpec {
  std::size_t kernel_size = 3;
  std::size_t dilation = 1;
  std::size_t stride = 0;
  std::size_t groups = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  std::size_t effective_stride() const { return stride == 0 ? kernel_size : stride; }
  std::size_t receptive_field() const { return dilation * (kernel_size - 1) + 1; }
  void validate() const;

  friend bool operator==(const Conv1DSpec&, const Conv1DSpec&) = default;
};

// Number of output positions of a conv over `length` inputs:
// floor((T - dilation*(kernel-1) - 1) / stride + 1).
std::size_t conv1d_out_len(std::size_t length, const Conv1DSpec& spec);
// Length produced by the transposed conv before zero right-padding.
std::size_t transposed_natural_len(std::size_t positions, const Conv1DSpec& spec);

enum class AttentionKind { kVanilla, kEntmax15 };

std::string to_string(AttentionKind kind);
AttentionKind attention_kind_from_string(const std::string& s);

// Per-instance statistics produced by RevIN normalization; rows follow the
// flattened (instance, channel) order of the normalized input.
struct RevINStats {
  Tensor mean;
  Tensor stdev;
  std::vector<bool> fallback;  // all cells of the row were masked
  bool any_fallback() const;
};

namespace nn {

// x: [n, T, in], weight: [out, in/groups, kernel], bias: [out] -> [n, D, out].
// Cross-correlation without padding.
Var conv1d(const Var& x, const Var& weight, const Var& bias, const Conv1DSpec& spec);

// r: [n, D, in], weight: [in, out/groups, kernel], bias: [out] -> [n, target, out].
// Output positions past the natural length are zero.
Var conv_transpose1d(const Var& r, const Var& weight, const Var& bias, const Conv1DSpec& spec,
                     std::size_t target_len);
// Bias-free variant (used for fixed-weight back-mapping).
Var conv_transpose1d(const Var& r, const Var& weight, const Conv1DSpec& spec, std::size_t target_len);

// Normalizes the last axis to zero mean / unit population variance.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, real eps = real(1e-5));

// Exact x * Phi(x).
Var gelu(const Var& x);

// Inverted dropout. Returns `x` itself when !training or p == 0.
Var dropout(const Var& x, real p, bool training, Rng& rng);

Var softmax_last(const Var& x);
Var entmax15_last(const Var& x);

// alpha = 1.5 entmax of one logit vector (sorted-threshold algorithm).
std::vector<real> entmax15(std::span<const real> logits);

// x: [n, T]; mask (optional, same shape, nonzero = masked sentinel).
// Statistics are detached and exclude masked cells. gamma/beta have one entry
// per channel; row i uses channel i % channels.
std::pair<Var, RevINStats> revin_normalize(const Var& x, const Tensor* mask, const Var& gamma, const Var& beta,
                                           real eps = real(1e-5));
Var revin_denormalize(const Var& y, const RevINStats& stats, const Var& gamma, const Var& beta,
                      real eps = real(1e-5));

}  // namespace nn

// Interleaved sin/cos encoding: pe[t][2k] = sin(t / 10000^(2k/d)),
// pe[t][2k+1] = cos(same). Requires even d.
Tensor positional_encoding(std::size_t length, std::size_t d);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the Kaiming-uniform default with
// a = sqrt(5).
void kaiming_uniform(Tensor& t, std::size_t fan_in, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, bool with_bias = true);

  void init(Rng& rng);
  Var forward(Tape& tape, const Var& x);
  std::vector<Parameter*> parameters();

  Parameter weight;  // [in, out]
  Parameter bias;    // [out]
  bool with_bias = true;
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(std::string name, Conv1DSpec spec);

  void init(Rng& rng);
  Var forward(Tape& tape, const Var& x);
  std::vector<Parameter*> parameters();

  Conv1DSpec spec;
  Parameter weight;  // [out, in/groups, kernel]
  Parameter bias;    // [out]
};

class ConvTranspose1d {
 public:
  ConvTranspose1d() = default;
  // `spec` is the forward conv being inverted; channels are swapped.
  ConvTranspose1d(std::string name, Conv1DSpec spec);

  void init(Rng& rng);
  Var forward(Tape& tape, const Var& r, std::size_t target_len);
  std::vector<Parameter*> parameters();

  Conv1DSpec spec;
  Parameter weight;  // [spec.out, spec.in/groups, kernel]
  Parameter bias;    // [spec.in]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::size_t d);

  Var forward(Tape& tape, const Var& x);
  std::vector<Parameter*> parameters();

  Parameter gamma;
  Parameter beta;
};

struct AttentionOutput {
  Var out;        // [n, L, d]
  Tensor weights; // [n, h, L, L], detached
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::string name, std::size_t d, std::size_t heads, AttentionKind kind);

  void init(Rng& rng);
  AttentionOutput forward(Tape& tape, const Var& x);
  std::vector<Parameter*> parameters();

  std::size_t d = 0;
  std::size_t heads = 1;
  AttentionKind kind = AttentionKind::kVanilla;
  Parameter wq, wk, wv, wo;  // [d, d]
};

class RevIN {
 public:
  RevIN() = default;
  RevIN(std::string name, std::size_t channels);

  std::pair<Var, RevINStats> normalize(Tape& tape, const Var& x, const Tensor* mask);
  Var denormalize(Tape& tape, const Var& y, const RevINStats& stats);
  std::vector<Parameter*> parameters();

  Parameter gamma;  // [channels]
  Parameter beta;   // [channels]
  real eps = real(1e-5);
};

}  // namespace tsrm
