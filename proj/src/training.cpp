#include "tsrm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "tsrm/error.hpp"
#include "tsrm/ops.hpp"

namespace tsrm {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite non-negative number");
  if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (early_stop_patience == 0 || plateau_patience == 0) throw ConfigError("patience values must be >= 1");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("plateau_factor must lie in (0, 1)");
  if (!(early_stop_threshold >= 0 && early_stop_threshold < 1)) throw ConfigError("early_stop_threshold in [0, 1)");
  if (!(missing_ratio > 0 && missing_ratio < 1)) throw ConfigError("missing_ratio must lie in (0, 1)");
  if (clip_norm < 0) throw ConfigError("clip_norm must be >= 0");
  if (window_stride == 0) throw ConfigError("window_stride must be positive");
}

ordered_json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"eval_batch_size", c.eval_batch_size},
          {"max_epochs", c.max_epochs},
          {"early_stop_threshold", c.early_stop_threshold},
          {"early_stop_patience", c.early_stop_patience},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"plateau_threshold", c.plateau_threshold},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"clip_norm", c.clip_norm},
          {"seed", c.seed},
          {"missing_ratio", c.missing_ratio},
          {"single_rm_weighting", c.single_rm_weighting},
          {"window_stride", c.window_stride},
          {"max_train_windows", c.max_train_windows},
          {"max_eval_windows", c.max_eval_windows}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train must be an object");
  TrainConfig c;
  const ordered_json defaults = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError("unknown key '" + it.key() + "' in train");
  }
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::remove_reference_t<decltype(out)>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("train.") + key + ": " + e.what());
    }
  };
  get("lr", c.lr);
  get("batch_size", c.batch_size);
  get("eval_batch_size", c.eval_batch_size);
  get("max_epochs", c.max_epochs);
  get("early_stop_threshold", c.early_stop_threshold);
  get("early_stop_patience", c.early_stop_patience);
  get("plateau_patience", c.plateau_patience);
  get("plateau_factor", c.plateau_factor);
  get("plateau_threshold", c.plateau_threshold);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("clip_norm", c.clip_norm);
  get("seed", c.seed);
  get("missing_ratio", c.missing_ratio);
  get("single_rm_weighting", c.single_rm_weighting);
  get("window_stride", c.window_stride);
  get("max_train_windows", c.max_train_windows);
  get("max_eval_windows", c.max_eval_windows);
  return c;
}

Adam::Adam(std::vector<Parameter*> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.emplace_back(p->value.shape(), 0);
    v_.emplace_back(p->value.shape(), 0);
  }
}

void Adam::step(double lr) {
  for (auto* p : params_) {
    if (!p->has_grad()) throw ContractError("trainable parameter '" + p->name + "' has no gradient");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto value = params_[i]->value.data();
    auto grad = params_[i]->grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad[k];
      m[k] = static_cast<real>(beta1_ * m[k] + (1 - beta1_) * g);
      v[k] = static_cast<real>(beta2_ * v[k] + (1 - beta2_) * g * g);
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      value[k] = static_cast<real>(value[k] - lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

double grad_norm(const std::vector<Parameter*>& params) {
  double s = 0;
  for (const auto* p : params) {
    if (!p->has_grad()) continue;
    for (auto g : p->grad.data()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (auto* p : params) {
      if (!p->has_grad()) continue;
      for (auto& g : p->grad.data()) g = static_cast<real>(g * scale);
    }
  }
  return norm;
}

PlateauScheduler::PlateauScheduler(double lr, std::size_t patience, double factor, double threshold)
    : lr_(lr), patience_(patience), factor_(factor), threshold_(threshold),
      best_(std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::step(double val) {
  if (std::isfinite(val) && val < best_ * (1.0 - threshold_)) {
    best_ = val;
    bad_ = 0;
  } else if (++bad_ >= patience_) {
    lr_ *= factor_;
    ++decays_;
    bad_ = 0;
  }
  return lr_;
}

EarlyStopper::EarlyStopper(double threshold, std::size_t patience)
    : threshold_(threshold), patience_(patience), best_(std::numeric_limits<double>::infinity()) {}

bool EarlyStopper::step(double val) {
  if (!std::isfinite(val)) non_finite_ = true;
  if (std::isfinite(val) && val < best_ * (1.0 - threshold_)) {
    best_ = val;
    since_ = 0;
  } else {
    ++since_;
  }
  return since_ >= patience_;
}

std::string History::to_csv(bool with_seconds) const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_mse,val_mae,lr" << (with_seconds ? ",seconds" : "") << "\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.train_loss << ',' << e.val_mse << ',' << e.val_mae << ',' << e.lr;
    if (with_seconds) os << ',' << e.seconds;
    os << "\n";
  }
  return os.str();
}

void History::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history file " + path.string());
  out << to_csv();
}

std::vector<Tensor> parameter_values(const TsrmModel& model) {
  std::vector<Tensor> out;
  for (const auto* p : model.parameters()) out.push_back(p->value);
  return out;
}

void load_parameter_values(TsrmModel& model, const std::vector<Tensor>& values) {
  auto params = model.parameters();
  if (params.size() != values.size()) throw ContractError("parameter snapshot does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.shape() != values[i].shape()) {
      throw DimensionError("snapshot of '" + params[i]->name + "' has shape " + shape_str(values[i].shape()));
    }
    params[i]->value = values[i];
  }
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::vector<std::size_t> strided_subset(const std::vector<std::size_t>& starts, std::size_t max_windows) {
  if (max_windows == 0 || starts.size() <= max_windows) return starts;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < max_windows; ++i) out.push_back(starts[i * starts.size() / max_windows]);
  return out;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::string diagnostic(std::size_t epoch, std::size_t batch, double lr, double loss,
                       const std::vector<Parameter*>& params) {
  std::ostringstream os;
  os << "non-finite training loss " << loss << " at epoch " << epoch << ", batch " << batch << ", lr " << lr
     << "; global grad norm " << grad_norm(params);
  std::vector<std::pair<double, std::string>> norms;
  for (const auto* p : params) {
    double s = 0;
    if (p->has_grad()) {
      for (auto g : p->grad.data()) s += static_cast<double>(g) * g;
    }
    norms.emplace_back(std::sqrt(s), p->name);
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) {
    return !(std::isfinite(a.first) && !std::isfinite(b.first)) &&
           ((!std::isfinite(a.first) && std::isfinite(b.first)) || a.first > b.first);
  });
  os << "; largest:";
  for (std::size_t i = 0; i < std::min<std::size_t>(5, norms.size()); ++i) {
    os << ' ' << norms[i].second << '=' << norms[i].first;
  }
  return os.str();
}

}  // namespace

Tensor window_mask(std::size_t start, std::size_t lookback, std::size_t features, double rm, std::uint64_t seed) {
  const auto bits = static_cast<std::uint64_t>(std::llround(rm * 1e6));
  return generate_mask(lookback, features, rm, splitmix(seed ^ splitmix(start) ^ splitmix(bits + 17))).m;
}

EvalOptions eval_options(const TrainConfig& cfg) {
  EvalOptions o;
  o.missing_ratio = cfg.missing_ratio;
  o.seed = cfg.seed;
  o.batch_size = cfg.eval_batch_size;
  o.stride = cfg.window_stride;
  o.max_windows = cfg.max_eval_windows;
  return o;
}

EvalRecord evaluate(TsrmModel& model, const SeriesDataset& ds, Split split, Task task, const EvalOptions& opts) {
  const ModelConfig& mc = model.config();
  const std::size_t len = mc.lookback, f = mc.features;
  const std::size_t horizon = opts.horizon == 0 ? mc.horizon : opts.horizon;
  if (task == Task::kForecast && horizon != mc.horizon) {
    throw ConfigError("checkpoint horizon " + std::to_string(mc.horizon) + " does not match requested " +
                      std::to_string(horizon));
  }
  if (task == Task::kImpute && mc.horizon != len) throw ConfigError("imputation needs H == T");
  if (ds.features() != f) {
    throw ConfigError("model expects " + std::to_string(f) + " features, dataset has " +
                      std::to_string(ds.features()));
  }
  auto starts = strided_subset(window_starts(ds, split, len, horizon, task, opts.stride), opts.max_windows);
  MetricAccumulator acc;
  for (std::size_t b = 0; b < starts.size(); b += opts.batch_size) {
    std::vector<std::size_t> chunk(starts.begin() + static_cast<std::ptrdiff_t>(b),
                                   starts.begin() + static_cast<std::ptrdiff_t>(std::min(starts.size(), b + opts.batch_size)));
    WindowBatch wb = gather_windows(ds, chunk, len, horizon, task);
    Tape tape(false);
    if (task == Task::kForecast) {
      auto out = model.forward(tape, wb.inputs, {});
      acc.add(out.output.value(), wb.targets);
    } else {
      Tensor mask(wb.inputs.shape());
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        Tensor m = window_mask(chunk[i], len, f, opts.missing_ratio, opts.seed);
        std::copy(m.data().begin(), m.data().end(), mask.ptr() + i * len * f);
      }
      ForwardOptions fo;
      fo.mask = &mask;
      auto out = model.forward(tape, apply_mask(wb.inputs, mask), fo);
      acc.add(out.output.value(), wb.targets, &mask);
    }
  }
  EvalRecord r = acc.result();
  r.split = to_string(split);
  std::ostringstream setting;
  if (task == Task::kForecast) {
    setting << horizon;
  } else {
    setting << opts.missing_ratio;
  }
  r.setting = setting.str();
  r.config_hash = hex_hash(config_hash(to_json(mc)));
  return r;
}

TrainResult train(TsrmModel& model, const SeriesDataset& ds, Task task, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  const std::size_t len = mc.lookback, f = mc.features, horizon = mc.horizon;
  if (task == Task::kImpute && horizon != len) throw ConfigError("imputation needs H == T");
  if (ds.features() != f) {
    throw ConfigError("model expects " + std::to_string(f) + " features, dataset has " +
                      std::to_string(ds.features()));
  }
  const auto all_starts = window_starts(ds, Split::kTrain, len, horizon, task, cfg.window_stride);
  Rng rng(cfg.seed);
  auto params = model.parameters();
  Adam adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps);
  PlateauScheduler scheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold);
  EarlyStopper stopper(cfg.early_stop_threshold, cfg.early_stop_patience);
  const EvalOptions eopts = eval_options(cfg);

  TrainResult result;
  result.best_val_mse = std::numeric_limits<double>::infinity();
  result.best_params = parameter_values(model);
  double lr = cfg.lr;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = all_starts;
    shuffle(order, rng);
    if (cfg.max_train_windows > 0 && order.size() > cfg.max_train_windows) order.resize(cfg.max_train_windows);

    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0, batch_idx = 0; b < order.size(); b += cfg.batch_size, ++batch_idx) {
      std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(b),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch_size)));
      WindowBatch wb = gather_windows(ds, chunk, len, horizon, task);
      model.zero_grad();
      Tape tape;
      ForwardOptions fo;
      fo.training = true;
      fo.rng = &rng;
      Var loss;
      if (task == Task::kForecast) {
        auto out = model.forward(tape, wb.inputs, fo);
        loss = forecast_loss(out.output, tape.constant(wb.targets));
      } else {
        Tensor mask = sample_mask(wb.inputs.shape(), cfg.missing_ratio, rng);
        fo.mask = &mask;
        auto out = model.forward(tape, apply_mask(wb.inputs, mask), fo);
        loss = imputation_loss(out.output, tape.constant(wb.targets), mask, cfg.missing_ratio,
                               cfg.single_rm_weighting);
      }
      tape.backward(loss);
      const double lv = loss.value()[0];
      const double norm = cfg.clip_norm > 0 ? clip_grad_norm(params, cfg.clip_norm) : grad_norm(params);
      if (!std::isfinite(lv) || !std::isfinite(norm)) throw NumericError(diagnostic(epoch, batch_idx, lr, lv, params));
      adam.step(lr);
      loss_sum += lv * static_cast<double>(chunk.size());
      seen += chunk.size();
    }
    model.zero_grad();

    EvalRecord val = evaluate(model, ds, Split::kVal, task, eopts);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, seen));
    rec.val_mse = val.mse;
    rec.val_mae = val.mae;
    rec.lr = lr;
    if (std::isfinite(val.mse) && val.mse < result.best_val_mse) {
      result.best_val_mse = val.mse;
      result.best_epoch = epoch;
      result.best_params = parameter_values(model);
    }
    lr = scheduler.step(val.mse);
    const bool stop = stopper.step(val.mse);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stop) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  result.non_finite_val = stopper.saw_non_finite();
  load_parameter_values(model, result.best_params);
  return result;
}

EvalRecord last_value_baseline(const SeriesDataset& ds, Split split, std::size_t lookback, std::size_t horizon,
                               std::size_t stride) {
  const std::size_t f = ds.features();
  MetricAccumulator acc;
  for (auto s : window_starts(ds, split, lookback, horizon, Task::kForecast, stride)) {
    WindowBatch wb = gather_windows(ds, {s}, lookback, horizon, Task::kForecast);
    Tensor pred(wb.targets.shape());
    for (std::size_t h = 0; h < horizon; ++h) {
      for (std::size_t c = 0; c < f; ++c) pred[h * f + c] = wb.inputs[(lookback - 1) * f + c];
    }
    acc.add(pred, wb.targets);
  }
  EvalRecord r = acc.result();
  r.split = to_string(split);
  r.setting = std::to_string(horizon);
  return r;
}

EvalRecord mean_fill_baseline(const SeriesDataset& ds, Split split, std::size_t lookback, double rm,
                              std::uint64_t seed, std::size_t stride) {
  const std::size_t f = ds.features();
  MetricAccumulator acc;
  for (auto s : window_starts(ds, split, lookback, lookback, Task::kImpute, stride)) {
    WindowBatch wb = gather_windows(ds, {s}, lookback, lookback, Task::kImpute);
    Tensor mask = window_mask(s, lookback, f, rm, seed).reshaped(wb.inputs.shape());
    Tensor pred = wb.inputs;
    for (std::size_t c = 0; c < f; ++c) {
      double sum = 0;
      std::size_t n = 0;
      for (std::size_t t = 0; t < lookback; ++t) {
        if (mask[t * f + c] == 0) {
          sum += wb.inputs[t * f + c];
          ++n;
        }
      }
      const real fill = static_cast<real>(n > 0 ? sum / static_cast<double>(n) : 0.0);
      for (std::size_t t = 0; t < lookback; ++t) {
        if (mask[t * f + c] != 0) pred[t * f + c] = fill;
      }
    }
    acc.add(pred, wb.targets, &mask);
  }
  EvalRecord r = acc.result();
  r.split = to_string(split);
  std::ostringstream os;
  os << rm;
  r.setting = os.str();
  return r;
}

}  // namespace tsrm
