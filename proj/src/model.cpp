#include "tsrm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "tsrm/error.hpp"
#include "tsrm/ops.hpp"

namespace tsrm {

using nlohmann::json;
using nlohmann::ordered_json;

void ModelConfig::validate(bool force_ranges) const {
  const std::string hint = " (pass --force-ranges to override)";
  if (!force_ranges) {
    if (num_layers > 12) {
      throw ConfigError("N=" + std::to_string(num_layers) + " outside the supported range [0, 12]" + hint);
    }
    static const std::set<std::size_t> kHeads{2, 4, 8, 16, 32};
    static const std::set<std::size_t> kDims{8, 16, 32, 64, 128};
    if (!kHeads.contains(heads)) {
      throw ConfigError("h=" + std::to_string(heads) + " not in {2, 4, 8, 16, 32}" + hint);
    }
    if (!kDims.contains(d_model)) {
      throw ConfigError("d=" + std::to_string(d_model) + " not in {8, 16, 32, 64, 128}" + hint);
    }
    if (conv_specs.empty() || conv_specs.size() > 4) {
      throw ConfigError("K=" + std::to_string(conv_specs.size()) + " outside the supported range [1, 4]" + hint);
    }
  }
  if (conv_specs.empty()) throw ConfigError("at least one representation conv is required");
  if (heads == 0 || d_model == 0 || d_model % heads != 0) {
    throw ConfigError("d=" + std::to_string(d_model) + " must be a positive multiple of h=" + std::to_string(heads));
  }
  if (d_model % 2 != 0) throw ConfigError("d must be even for the positional encoding");
  if (lookback == 0 || horizon == 0 || features == 0) throw ConfigError("T, H and F must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  for (const auto& spec : resolved_specs()) {
    spec.validate();
    if (spec.receptive_field() > lookback) {
      throw ConfigError("conv receptive field " + std::to_string(spec.receptive_field()) + " (kernel " +
                        std::to_string(spec.kernel_size) + ", dilation " + std::to_string(spec.dilation) +
                        ") exceeds T=" + std::to_string(lookback));
    }
  }
}

std::vector<Conv1DSpec> ModelConfig::resolved_specs() const {
  std::vector<Conv1DSpec> out = conv_specs;
  for (auto& s : out) {
    s.in_channels = d_model;
    s.out_channels = d_model;
  }
  return out;
}

ordered_json to_json(const ModelConfig& cfg) {
  ordered_json convs = ordered_json::array();
  for (const auto& s : cfg.conv_specs) {
    convs.push_back({{"kernel_size", s.kernel_size},
                     {"dilation", s.dilation},
                     {"stride", s.effective_stride()},
                     {"groups", s.groups}});
  }
  return {{"num_layers", cfg.num_layers}, {"heads", cfg.heads},
          {"d_model", cfg.d_model},       {"conv_specs", convs},
          {"attention", to_string(cfg.attention)}, {"ifc", cfg.ifc},
          {"merge_trainable", cfg.merge_trainable}, {"dropout", cfg.dropout},
          {"lookback", cfg.lookback},     {"horizon", cfg.horizon},
          {"features", cfg.features}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.contains(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"num_layers", "heads", "d_model", "conv_specs", "attention", "ifc", "merge_trainable", "dropout",
                  "lookback", "horizon", "features"},
                 "model");
  ModelConfig cfg;
  read_field(j, "num_layers", cfg.num_layers, "model");
  read_field(j, "heads", cfg.heads, "model");
  read_field(j, "d_model", cfg.d_model, "model");
  read_field(j, "ifc", cfg.ifc, "model");
  read_field(j, "merge_trainable", cfg.merge_trainable, "model");
  read_field(j, "dropout", cfg.dropout, "model");
  read_field(j, "lookback", cfg.lookback, "model");
  read_field(j, "horizon", cfg.horizon, "model");
  read_field(j, "features", cfg.features, "model");
  std::string kind = to_string(cfg.attention);
  read_field(j, "attention", kind, "model");
  cfg.attention = attention_kind_from_string(kind);
  if (j.contains("conv_specs")) {
    const json& convs = j.at("conv_specs");
    if (!convs.is_array()) throw ConfigError("model.conv_specs must be an array");
    for (const auto& c : convs) {
      reject_unknown(c, {"kernel_size", "dilation", "stride", "groups"}, "model.conv_specs[]");
      Conv1DSpec s;
      read_field(c, "kernel_size", s.kernel_size, "model.conv_specs[]");
      read_field(c, "dilation", s.dilation, "model.conv_specs[]");
      read_field(c, "stride", s.stride, "model.conv_specs[]");
      read_field(c, "groups", s.groups, "model.conv_specs[]");
      if (s.stride == s.kernel_size) s.stride = 0;
      cfg.conv_specs.push_back(s);
    }
  } else {
    cfg.conv_specs = auto_conv_specs(cfg.lookback, 2);
  }
  return cfg;
}

std::vector<Conv1DSpec> auto_conv_specs(std::size_t lookback, std::size_t count) {
  if (count == 0) throw ConfigError("need at least one conv");
  if (lookback < 3) throw ConfigError("lookback too short for automatic conv layout");
  std::vector<Conv1DSpec> specs;
  specs.push_back(Conv1DSpec{3, 1});
  const double largest = std::max(3.0, std::round(0.65 * static_cast<double>(lookback)));
  for (std::size_t j = 1; j < count; ++j) {
    const double frac = static_cast<double>(j) / static_cast<double>(count - 1);
    const double field = 3.0 * std::pow(largest / 3.0, frac);
    const auto kernel = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(std::sqrt(field))));
    auto dilation =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((field - 1.0) / static_cast<double>(kernel - 1))));
    while (dilation > 1 && dilation * (kernel - 1) + 1 > lookback) --dilation;
    specs.push_back(Conv1DSpec{kernel, dilation});
  }
  return specs;
}

ModelConfig etth1_default_config() {
  ModelConfig cfg;
  cfg.num_layers = 3;
  cfg.heads = 4;
  cfg.d_model = 64;
  cfg.conv_specs = auto_conv_specs(96, 3);
  cfg.lookback = 96;
  cfg.horizon = 96;
  cfg.features = 7;
  return cfg;
}

std::vector<Parameter*> EncodingLayer::parameters() {
  std::vector<Parameter*> out;
  for (auto& c : repr_convs) {
    for (auto* p : c.parameters()) out.push_back(p);
  }
  for (auto* p : norm1.parameters()) out.push_back(p);
  for (auto* p : attn.parameters()) out.push_back(p);
  for (auto* p : norm2.parameters()) out.push_back(p);
  for (auto* p : block2.parameters()) out.push_back(p);
  for (auto* p : merge_parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter*> EncodingLayer::merge_parameters() {
  std::vector<Parameter*> out;
  for (auto& c : merge_convs) {
    for (auto* p : c.parameters()) out.push_back(p);
  }
  for (auto* p : merge_proj.parameters()) out.push_back(p);
  return out;
}

TsrmModel::TsrmModel(ModelConfig cfg, bool force_ranges) : config_(std::move(cfg)) {
  config_.validate(force_ranges);
  const std::size_t d = config_.d_model;
  const std::size_t f = config_.features;
  const auto specs = config_.resolved_specs();
  embedding = Linear("embedding", 1, d);
  revin = RevIN("revin", f);
  for (std::size_t i = 0; i < config_.num_layers; ++i) {
    const std::string pre = "el." + std::to_string(i) + ".";
    EncodingLayer layer;
    for (std::size_t j = 0; j < specs.size(); ++j) {
      layer.repr_convs.emplace_back(pre + "rl." + std::to_string(j), specs[j]);
      layer.merge_convs.emplace_back(pre + "ml." + std::to_string(j), specs[j]);
    }
    layer.norm1 = LayerNorm(pre + "norm1", d);
    layer.attn = MultiHeadAttention(pre + "attn", d, config_.heads, config_.attention);
    layer.norm2 = LayerNorm(pre + "norm2", d);
    const std::size_t width = config_.ifc ? f * d : d;
    layer.block2 = Linear(pre + "block2", width, width);
    layer.merge_proj = Linear(pre + "merge_proj", d * specs.size(), d);
    if (!config_.merge_trainable) {
      for (auto* p : layer.merge_parameters()) p->trainable = false;
    }
    layers.push_back(std::move(layer));
  }
  head = Linear("head", config_.lookback * d, config_.horizon);
  pos_encoding_ = positional_encoding(config_.lookback, d);
}

void TsrmModel::init(Rng& rng) {
  embedding.init(rng);
  for (auto& layer : layers) {
    for (auto& c : layer.repr_convs) c.init(rng);
    layer.attn.init(rng);
    layer.block2.init(rng);
    for (auto& c : layer.merge_convs) c.init(rng);
    layer.merge_proj.init(rng);
  }
  head.init(rng);
}

std::vector<std::size_t> TsrmModel::split_sizes() const {
  std::vector<std::size_t> sizes;
  for (const auto& s : config_.resolved_specs()) sizes.push_back(conv1d_out_len(config_.lookback, s));
  return sizes;
}

std::size_t TsrmModel::representation_len() const {
  std::size_t total = 0;
  for (auto s : split_sizes()) total += s;
  return total;
}

Var TsrmModel::representation_layer(Tape& tape, EncodingLayer& layer, const Var& embedded) {
  std::vector<Var> parts;
  parts.reserve(layer.repr_convs.size());
  for (auto& conv : layer.repr_convs) parts.push_back(conv.forward(tape, embedded));
  return ops::concat(parts, 1);
}

MiddleOutput TsrmModel::middle_blocks(Tape& tape, EncodingLayer& layer, const Var& repr, bool training, Rng* rng) {
  const real p = static_cast<real>(config_.dropout);
  if (training && p > 0 && !rng) throw ContractError("training with dropout needs an rng");
  Rng dummy(0);
  Rng& r = rng ? *rng : dummy;

  AttentionOutput attn = layer.attn.forward(tape, nn::gelu(layer.norm1.forward(tape, repr)));
  Var x = ops::add(repr, nn::dropout(attn.out, p, training, r));

  Var z = nn::gelu(layer.norm2.forward(tape, x));
  Var lin;
  if (config_.ifc) {
    const Shape& s = z.shape();
    const std::size_t n = s[0], len = s[1], d = s[2], f = config_.features;
    if (n % f != 0) throw ContractError("IFC block needs all feature channels of each instance");
    const std::size_t batch = n / f;
    Var joint = ops::reshape(ops::permute(ops::reshape(z, {batch, f, len, d}), {0, 2, 1, 3}), {batch, len, f * d});
    Var mixed = layer.block2.forward(tape, joint);
    lin = ops::reshape(ops::permute(ops::reshape(mixed, {batch, len, f, d}), {0, 2, 1, 3}), {n, len, d});
  } else {
    lin = layer.block2.forward(tape, z);
  }
  x = ops::add(x, nn::dropout(lin, p, training, r));
  return {x, std::move(attn.weights)};
}

Var TsrmModel::merge_layer(Tape& tape, EncodingLayer& layer, const Var& repr) {
  auto blocks = ops::split(repr, split_sizes(), 1);
  std::vector<Var> restored;
  restored.reserve(blocks.size());
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    restored.push_back(layer.merge_convs[j].forward(tape, blocks[j], config_.lookback));
  }
  return layer.merge_proj.forward(tape, ops::concat(restored, 2));
}

LayerOutput TsrmModel::encoding_layer(Tape& tape, EncodingLayer& layer, const Var& embedded,
                                      const Var& prev_residual, bool training, Rng* rng) {
  Var repr = representation_layer(tape, layer, embedded);
  if (prev_residual.valid()) repr = ops::add(repr, prev_residual);
  MiddleOutput mid = middle_blocks(tape, layer, repr, training, rng);
  Var residual = prev_residual.valid() ? ops::add(mid.out, prev_residual) : mid.out;
  Var out = merge_layer(tape, layer, residual);
  return {out, residual, std::move(mid.attention)};
}

ForwardResult TsrmModel::forward(Tape& tape, const Tensor& x_in, const ForwardOptions& opts) {
  const std::size_t len = config_.lookback, f = config_.features, d = config_.d_model;
  const bool unbatched = x_in.rank() == 2;
  const Tensor x = unbatched ? x_in.reshaped({1, x_in.dim(0), x_in.dim(1)}) : x_in;
  if (x.rank() != 3 || x.dim(1) != len || x.dim(2) != f) {
    throw DimensionError("model input " + shape_str(x_in.shape()) + " does not match [B, " + std::to_string(len) +
                         ", " + std::to_string(f) + "]");
  }
  if (!x.all_finite()) throw DataError("model input contains NaN or Inf");
  const std::size_t batch = x.dim(0), n = batch * f;

  Var input = ops::reshape(ops::permute(tape.constant(x), {0, 2, 1}), {n, len});
  Tensor mask_rows;
  if (opts.mask) {
    if (opts.mask->size() != x.size()) {
      throw DimensionError("mask " + shape_str(opts.mask->shape()) + " does not match input " + shape_str(x.shape()));
    }
    Tape scratch(false);
    mask_rows = ops::reshape(ops::permute(scratch.constant(opts.mask->reshaped(x.shape())), {0, 2, 1}), {n, len})
                    .value();
  }
  auto [normalized, stats] = revin.normalize(tape, input, opts.mask ? &mask_rows : nullptr);

  Var e = embedding.forward(tape, ops::reshape(normalized, {n, len, 1}));
  e = ops::add(e, tape.constant(pos_encoding_));

  ForwardResult result;
  result.attention_captured = opts.capture_attention;
  Var residual;
  for (auto& layer : layers) {
    LayerOutput lo = encoding_layer(tape, layer, e, residual, opts.training, opts.rng);
    e = lo.embedded;
    residual = lo.residual;
    if (opts.capture_attention) result.attention.push_back(std::move(lo.attention));
  }

  Var y = head.forward(tape, ops::reshape(e, {n, len * d}));
  y = revin.denormalize(tape, y, stats);
  const std::size_t horizon = config_.horizon;
  y = ops::permute(ops::reshape(y, {batch, f, horizon}), {0, 2, 1});
  if (unbatched) y = ops::reshape(y, {horizon, f});
  result.output = y;
  result.revin = std::move(stats);
  return result;
}

std::vector<Parameter*> TsrmModel::parameters() {
  std::vector<Parameter*> out;
  for (auto* p : embedding.parameters()) out.push_back(p);
  for (auto* p : revin.parameters()) out.push_back(p);
  for (auto& layer : layers) {
    for (auto* p : layer.parameters()) out.push_back(p);
  }
  for (auto* p : head.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> TsrmModel::parameters() const {
  auto mut = const_cast<TsrmModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t TsrmModel::count_parameters() const {
  std::size_t total = 0;
  for (const auto* p : parameters()) {
    if (p->trainable) total += p->value.size();
  }
  return total;
}

void TsrmModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

std::size_t count_parameters(const TsrmModel& model) { return model.count_parameters(); }

std::uint64_t config_hash(const ordered_json& j) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex_hash(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tsrm
