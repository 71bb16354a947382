#include "tsrm/explain.hpp"

#include <algorithm>
#include <sstream>

#include "tsrm/error.hpp"
#include "tsrm/ops.hpp"

namespace tsrm {

AttentionSet collect_attention(const ForwardResult& result, std::size_t features, std::size_t item) {
  if (!result.attention_captured) throw ContractError("attention was not captured for this forward pass");
  AttentionSet out;
  for (const Tensor& layer : result.attention) {
    if (layer.rank() != 4 || layer.dim(0) % features != 0) {
      throw DimensionError("captured attention " + shape_str(layer.shape()) + " does not split into " +
                           std::to_string(features) + " features");
    }
    const std::size_t batch = layer.dim(0) / features;
    if (item >= batch) throw DimensionError("batch item " + std::to_string(item) + " out of range");
    const std::size_t h = layer.dim(1), d = layer.dim(2), block = h * d * d;
    std::vector<Tensor> per_feature;
    for (std::size_t f = 0; f < features; ++f) {
      const real* src = layer.ptr() + (item * features + f) * block;
      per_feature.emplace_back(Shape{h, d, d}, std::vector<real>(src, src + block));
    }
    out.push_back(std::move(per_feature));
  }
  return out;
}

namespace {

void check_square(const Tensor& w) {
  if (w.rank() != 3 || w.dim(1) != w.dim(2)) throw DimensionError("attention map must be [h, D, D], got " + shape_str(w.shape()));
}

}  // namespace

Tensor key_importance(const Tensor& weights) {
  check_square(weights);
  const std::size_t h = weights.dim(0), d = weights.dim(1);
  Tensor out({d}, 0);
  for (std::size_t k = 0; k < h; ++k) {
    for (std::size_t q = 0; q < d; ++q) {
      for (std::size_t j = 0; j < d; ++j) out[j] += weights[(k * d + q) * d + j];
    }
  }
  for (auto& v : out.data()) v /= static_cast<real>(h * d);
  return out;
}

Tensor key_importance(const Tensor& weights, std::size_t head) {
  check_square(weights);
  if (head >= weights.dim(0)) throw DimensionError("head index out of range");
  const std::size_t d = weights.dim(1);
  Tensor one({1, d, d}, std::vector<real>(weights.ptr() + head * d * d, weights.ptr() + (head + 1) * d * d));
  return key_importance(one);
}

Tensor backmap_importance(const Tensor& importance, const std::vector<Conv1DSpec>& specs, std::size_t lookback) {
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (const auto& s : specs) {
    Conv1DSpec one = s;
    one.in_channels = one.out_channels = 1;
    one.groups = 1;
    sizes.push_back(conv1d_out_len(lookback, one));
    total += sizes.back();
  }
  if (importance.size() != total) {
    throw DimensionError("importance has " + std::to_string(importance.size()) + " keys, conv layout gives D=" +
                         std::to_string(total));
  }
  Tape tape(false);
  Var scores = tape.constant(importance.reshaped({1, total, 1}));
  auto blocks = ops::split(scores, sizes, 1);
  Tensor timeline({lookback}, 0);
  for (std::size_t j = 0; j < specs.size(); ++j) {
    Conv1DSpec one = specs[j];
    one.in_channels = one.out_channels = 1;
    one.groups = 1;
    Var w = tape.constant(Tensor({1, 1, one.kernel_size}, real(1) / static_cast<real>(one.kernel_size)));
    Tensor mapped = nn::conv_transpose1d(blocks[j], w, one, lookback).value();
    for (std::size_t t = 0; t < lookback; ++t) timeline[t] += mapped[t];
  }
  return timeline;
}

Tensor backmap_attention(const Tensor& weights, const std::vector<Conv1DSpec>& specs, std::size_t lookback) {
  return backmap_importance(key_importance(weights), specs, lookback);
}

Tensor minmax(const Tensor& x) {
  Tensor out(x.shape(), 0);
  if (x.empty()) return out;
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  const real range = *hi - *lo;
  if (!(range > 0)) return out;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / range;
  return out;
}

FeatureReport build_feature_report(const std::vector<Tensor>& timelines, double threshold) {
  FeatureReport fr;
  if (timelines.empty()) return fr;
  const std::size_t len = timelines.front().size();
  Tensor sum({len}, 0);
  for (const auto& t : timelines) {
    if (t.size() != len) throw DimensionError("timelines must share one length");
    fr.raw.push_back(t);
    fr.layers.push_back(minmax(t));
    for (std::size_t i = 0; i < len; ++i) sum[i] += fr.layers.back()[i];
  }
  fr.combined = minmax(sum);
  for (std::size_t i = 0; i < len; ++i) {
    if (fr.combined[i] >= threshold) fr.highlights.push_back(i);
  }
  return fr;
}

AttentionReport explain_window(TsrmModel& model, const Tensor& x, const ExplainOptions& opts) {
  const ModelConfig& mc = model.config();
  if (x.rank() != 2 || x.dim(0) != mc.lookback || x.dim(1) != mc.features) {
    throw DimensionError("explain expects one window [" + std::to_string(mc.lookback) + ", " +
                         std::to_string(mc.features) + "], got " + shape_str(x.shape()));
  }
  Tape tape(false);
  ForwardOptions fo;
  fo.capture_attention = true;
  fo.mask = opts.mask;
  ForwardResult result = model.forward(tape, x, fo);
  AttentionSet set = collect_attention(result, mc.features);

  AttentionReport report;
  report.threshold = opts.threshold;
  report.lookback = mc.lookback;
  report.num_layers = set.size();
  report.window_start = opts.window_start;
  if (!set.empty()) report.raw_shape = set.front().front().shape();
  const auto specs = mc.resolved_specs();
  for (std::size_t f = 0; f < mc.features; ++f) {
    std::vector<Tensor> timelines;
    for (const auto& layer : set) timelines.push_back(backmap_attention(layer[f], specs, mc.lookback));
    FeatureReport fr = build_feature_report(timelines, opts.threshold);
    fr.feature = f;
    fr.name = f < opts.feature_names.size() ? opts.feature_names[f] : "f" + std::to_string(f);
    for (std::size_t t = 0; t < mc.lookback; ++t) fr.values.push_back(x[t * mc.features + f]);
    if (opts.per_head) {
      for (const auto& layer : set) {
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < layer[f].dim(0); ++h) {
          heads.push_back(minmax(backmap_importance(key_importance(layer[f], h), specs, mc.lookback)));
        }
        fr.heads.push_back(std::move(heads));
      }
    }
    report.features.push_back(std::move(fr));
  }
  return report;
}

namespace {

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

nlohmann::ordered_json to_json(const AttentionReport& report) {
  nlohmann::ordered_json j;
  j["threshold"] = report.threshold;
  j["lookback"] = report.lookback;
  j["num_layers"] = report.num_layers;
  j["raw_attention_shape"] = report.raw_shape;
  j["window_start"] = report.window_start;
  j["features"] = nlohmann::ordered_json::array();
  for (const auto& f : report.features) {
    nlohmann::ordered_json fj;
    fj["feature"] = f.feature;
    fj["name"] = f.name;
    fj["values"] = f.values;
    fj["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : f.layers) fj["layers"].push_back(to_vec(l));
    fj["combined"] = to_vec(f.combined);
    fj["highlights"] = f.highlights;
    if (!f.heads.empty()) {
      fj["heads"] = nlohmann::ordered_json::array();
      for (const auto& layer : f.heads) {
        nlohmann::ordered_json lj = nlohmann::ordered_json::array();
        for (const auto& h : layer) lj.push_back(to_vec(h));
        fj["heads"].push_back(lj);
      }
    }
    j["features"].push_back(fj);
  }
  return j;
}

std::string to_csv(const AttentionReport& report, std::size_t feature) {
  if (feature >= report.features.size()) throw DimensionError("feature index out of range");
  const FeatureReport& f = report.features[feature];
  std::ostringstream os;
  os.precision(17);
  os << "t,value";
  for (std::size_t n = 0; n < f.layers.size(); ++n) os << ",score_EL" << n;
  os << ",combined,highlighted\n";
  for (std::size_t t = 0; t < report.lookback; ++t) {
    os << t << ',';
    if (t < f.values.size()) os << f.values[t];
    for (const auto& l : f.layers) os << ',' << l[t];
    const double c = f.combined.empty() ? 0.0 : static_cast<double>(f.combined[t]);
    os << ',' << c << ',' << (std::binary_search(f.highlights.begin(), f.highlights.end(), t) ? 1 : 0) << "\n";
  }
  return os.str();
}

}  // namespace tsrm
