#include "tsrm/cli.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "tsrm/checkpoint.hpp"
#include "tsrm/error.hpp"
#include "tsrm/explain.hpp"

namespace tsrm {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kInitSalt = 0x9e3779b97f4a7c15ULL;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.contains(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
T get_as(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

DataRef data_ref_from_json(const json& j) {
  reject_unknown(j, {"name", "path", "registry", "synthetic", "standardize", "split"}, "data");
  DataRef d;
  if (j.contains("name")) d.name = get_as<std::string>(j, "name", "data");
  if (j.contains("path")) d.path = get_as<std::string>(j, "path", "data");
  if (j.contains("registry")) d.registry = get_as<std::string>(j, "registry", "data");
  if (j.contains("standardize")) d.split.standardize = get_as<bool>(j, "standardize", "data");
  if (j.contains("synthetic")) {
    const json& s = j.at("synthetic");
    reject_unknown(s, {"length", "channels", "noise", "seed"}, "data.synthetic");
    SineSpec spec;
    if (s.contains("length")) spec.length = get_as<std::size_t>(s, "length", "data.synthetic");
    if (s.contains("channels")) spec.channels = get_as<std::size_t>(s, "channels", "data.synthetic");
    if (s.contains("noise")) spec.noise = get_as<double>(s, "noise", "data.synthetic");
    if (s.contains("seed")) spec.seed = get_as<std::uint64_t>(s, "seed", "data.synthetic");
    if (spec.length == 0 || spec.channels == 0) throw ConfigError("data.synthetic needs length and channels > 0");
    d.synthetic = spec;
  }
  if (j.contains("split")) {
    const json& s = j.at("split");
    reject_unknown(s, {"train", "val", "test", "train_frac", "val_frac"}, "data.split");
    if (s.contains("train")) d.split.train = get_as<std::size_t>(s, "train", "data.split");
    if (s.contains("val")) d.split.val = get_as<std::size_t>(s, "val", "data.split");
    if (s.contains("test")) d.split.test = get_as<std::size_t>(s, "test", "data.split");
    if (s.contains("train_frac")) d.split.train_frac = get_as<double>(s, "train_frac", "data.split");
    if (s.contains("val_frac")) d.split.val_frac = get_as<double>(s, "val_frac", "data.split");
    if (d.split.train.has_value() != d.split.val.has_value() || d.split.train.has_value() != d.split.test.has_value()) {
      throw ConfigError("data.split row counts need all of train, val and test");
    }
    const double tf = d.split.train_frac, vf = d.split.val_frac;
    if (!(tf > 0) || !(vf > 0) || tf + vf >= 1) throw ConfigError("data.split fractions must be positive and sum below 1");
  }
  if (d.path.empty() && !d.synthetic && d.name.empty()) {
    throw ConfigError("data needs one of path, synthetic or a dataset name");
  }
  return d;
}

ordered_json to_json(const DataRef& d) {
  ordered_json j;
  if (!d.name.empty()) j["name"] = d.name;
  if (!d.path.empty()) j["path"] = d.path;
  if (!d.registry.empty()) j["registry"] = d.registry;
  if (d.synthetic) {
    j["synthetic"] = {{"length", d.synthetic->length},
                      {"channels", d.synthetic->channels},
                      {"noise", d.synthetic->noise},
                      {"seed", d.synthetic->seed}};
  }
  j["standardize"] = d.split.standardize;
  if (d.split.train) {
    j["split"] = {{"train", *d.split.train}, {"val", *d.split.val}, {"test", *d.split.test}};
  } else {
    j["split"] = {{"train_frac", d.split.train_frac}, {"val_frac", d.split.val_frac}};
  }
  return j;
}

std::string join_paths(const std::vector<fs::path>& v) {
  std::string s;
  for (const auto& p : v) s += (s.empty() ? "" : ", ") + p.string();
  return s;
}

// Config directory first, then TSRM_DATA_DIR.
fs::path locate(const std::string& p, const fs::path& base, const std::string& what) {
  fs::path path(p);
  if (path.is_absolute()) {
    if (!fs::exists(path)) throw DataError(what + " not found: " + path.string());
    return path;
  }
  std::vector<fs::path> tried;
  tried.push_back(base.empty() ? fs::current_path() / path : base / path);
  if (const char* root = std::getenv("TSRM_DATA_DIR"); root && *root) tried.push_back(fs::path(root) / path);
  for (const auto& c : tried) {
    if (fs::exists(c)) return fs::absolute(c).lexically_normal();
  }
  throw DataError(what + " '" + p + "' not found (looked in " + join_paths(tried) + ")");
}

std::vector<std::string> default_stems(const std::string& name) {
  std::vector<std::string> out{name + ".csv"};
  if (auto info = known_dataset(name)) {
    if (info->name == "ECL") out.push_back("electricity.csv");
    if (info->name == "Exchange") out.push_back("exchange_rate.csv");
    if (info->name == "Weather") out.push_back("weather.csv");
    if (info->name != name) out.push_back(info->name + ".csv");
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

std::string format_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string conv_layout(const ModelConfig& m) {
  std::string s;
  for (const auto& c : m.conv_specs) {
    if (!s.empty()) s += ';';
    s += "k" + std::to_string(c.kernel_size) + "d" + std::to_string(c.dilation) + "s" +
         std::to_string(c.effective_stride());
  }
  return s;
}

std::size_t total_parameters(const TsrmModel& model) {
  std::size_t n = 0;
  for (const auto* p : model.parameters()) n += p->value.size();
  return n;
}

ordered_json checkpoint_run_json(const RunConfig& cfg) {
  // The output directory is left out so identical runs in different
  // directories produce identical checkpoints.
  ordered_json j = to_json(cfg);
  j.erase("out");
  return j;
}

RunConfig run_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.is_object() || !ckpt.meta.contains("run")) {
    throw ConfigError("checkpoint carries no run config");
  }
  return run_config_from_json(ckpt.meta.at("run"), {}, true);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string file_safe(const std::string& s) {
  std::string out;
  for (unsigned char c : s) out += std::isalnum(c) || c == '-' || c == '_' || c == '.' ? static_cast<char>(c) : '_';
  return out;
}

}  // namespace

RunConfig run_config_from_json(const json& j, const fs::path& base_dir, bool force_ranges) {
  reject_unknown(j, {"task", "seed", "out", "model", "train", "data", "horizons", "ratios"}, "config");
  RunConfig cfg;
  cfg.base_dir = base_dir;
  if (j.contains("task")) cfg.task = task_from_string(get_as<std::string>(j, "task", "config"));

  const json model = j.contains("model") ? j.at("model") : json::object();
  if (!model.is_object()) throw ConfigError("model must be an object");
  cfg.model = model_config_from_json(model);
  cfg.features_given = model.contains("features");
  if (cfg.task == Task::kForecast && !model.contains("horizon")) {
    throw ConfigError("forecast runs need model.horizon");
  }
  if (cfg.task == Task::kImpute) {
    if (model.contains("horizon") && cfg.model.horizon != cfg.model.lookback) {
      throw ConfigError("imputation reconstructs the window, so model.horizon must equal model.lookback");
    }
    cfg.model.horizon = cfg.model.lookback;
  }

  cfg.train = train_config_from_json(j.contains("train") ? j.at("train") : json::object());
  cfg.seed = j.contains("seed") ? get_as<std::uint64_t>(j, "seed", "config") : cfg.train.seed;
  cfg.train.seed = cfg.seed;
  if (j.contains("out")) cfg.out = get_as<std::string>(j, "out", "config");
  if (!j.contains("data")) throw ConfigError("config needs a data section");
  cfg.data = data_ref_from_json(j.at("data"));
  if (j.contains("horizons")) cfg.horizons = get_as<std::vector<std::size_t>>(j, "horizons", "config");
  if (j.contains("ratios")) cfg.ratios = get_as<std::vector<double>>(j, "ratios", "config");
  for (double r : cfg.ratios) {
    if (!(r > 0 && r < 1)) throw ConfigError("ratios must lie in (0, 1), got " + format_double(r));
  }
  cfg.model.validate(force_ranges);
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& file, bool force_ranges) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
  return run_config_from_json(j, fs::absolute(file).parent_path(), force_ranges);
}

ordered_json to_json(const RunConfig& cfg) {
  ordered_json j;
  j["task"] = to_string(cfg.task);
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  j["model"] = to_json(cfg.model);
  j["train"] = to_json(cfg.train);
  j["data"] = to_json(cfg.data);
  j["horizons"] = cfg.horizons;
  j["ratios"] = cfg.ratios;
  return j;
}

SeriesDataset load_dataset(RunConfig& cfg) {
  DataRef& d = cfg.data;
  SeriesDataset ds;
  if (d.synthetic) {
    ds = synthetic_sine(*d.synthetic);
    if (!d.name.empty()) ds.name = d.name;
  } else {
    fs::path registry_dir = cfg.base_dir;
    if (!d.registry.empty()) {
      const fs::path reg = locate(d.registry, cfg.base_dir, "dataset registry");
      d.registry = reg.string();
      registry_dir = reg.parent_path();
      if (d.name.empty()) throw ConfigError("data.registry needs data.name");
      bool found = false;
      for (const auto& info : load_registry(reg)) {
        if (info.name != d.name) continue;
        found = true;
        if (d.path.empty()) d.path = locate(info.path, registry_dir, "dataset file").string();
        if (!d.split.train && info.train > 0) {
          d.split.train = info.train;
          d.split.val = info.val;
          d.split.test = info.test;
        }
      }
      if (!found) throw DataError("dataset '" + d.name + "' is not in registry " + reg.string());
    }
    fs::path path;
    if (!d.path.empty()) {
      path = locate(d.path, cfg.base_dir, "dataset file");
    } else {
      std::vector<fs::path> tried;
      for (const auto& stem : default_stems(d.name)) {
        try {
          path = locate(stem, cfg.base_dir, "dataset file");
          break;
        } catch (const DataError&) {
          tried.push_back(stem);
        }
      }
      if (path.empty()) {
        throw DataError("no file for dataset '" + d.name + "' (tried " + join_paths(tried) +
                        " in the config directory and TSRM_DATA_DIR)");
      }
    }
    d.path = path.string();
    ds = load_csv(path, d.name);
  }
  split_and_standardize(ds, d.split);
  if (cfg.features_given && cfg.model.features != ds.features()) {
    throw ConfigError("model.features is " + std::to_string(cfg.model.features) + " but the dataset has " +
                      std::to_string(ds.features()) + " channels");
  }
  cfg.model.features = ds.features();
  cfg.features_given = true;
  return ds;
}

RunSummary run_training(RunConfig cfg, const SeriesDataset& ds, const fs::path& out_dir, bool verbose) {
  fs::create_directories(out_dir);
  TsrmModel model(cfg.model, true);
  Rng init(cfg.seed ^ kInitSalt);
  model.init(init);

  const ordered_json run_json = to_json(cfg);
  write_text(out_dir / "resolved_config.json", run_json.dump(2) + "\n");

  EpochCallback progress;
  if (verbose) {
    progress = [](const EpochRecord& e) {
      std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_mse " << e.val_mse << " val_mae "
                << e.val_mae << " lr " << e.lr << " (" << e.seconds << "s)" << std::endl;
    };
  }
  RunSummary summary;
  summary.result = train(model, ds, cfg.task, cfg.train, progress);
  const TrainResult& r = summary.result;
  if (r.non_finite_val) std::cerr << "warning: validation MSE was not finite in at least one epoch\n";

  write_text(out_dir / "history.csv", r.history.to_csv(false));
  std::string timing = "epoch,seconds\n";
  for (const auto& e : r.history.epochs) timing += std::to_string(e.epoch) + "," + format_double(e.seconds) + "\n";
  write_text(out_dir / "timing.csv", timing);

  const ordered_json ckpt_run = checkpoint_run_json(cfg);
  const std::string hash = hex_hash(config_hash(ckpt_run));
  EvalOptions eo = eval_options(cfg.train);
  summary.test = evaluate(model, ds, Split::kTest, cfg.task, eo);
  summary.test.epoch = static_cast<int>(r.best_epoch);
  summary.test.config_hash = hash;
  summary.test.setting = cfg.task == Task::kForecast ? std::to_string(cfg.model.horizon)
                                                     : format_double(cfg.train.missing_ratio);
  summary.parameters = total_parameters(model);
  summary.trainable = count_parameters(model);

  ordered_json meta;
  meta["run"] = ckpt_run;
  meta["config_hash"] = hash;
  meta["best_epoch"] = r.best_epoch;
  meta["best_val_mse"] = r.best_val_mse;
  meta["stopped_early"] = r.stopped_early;
  summary.checkpoint = out_dir / "checkpoint.tsrm";
  save_checkpoint(summary.checkpoint, model, meta);

  ordered_json metrics;
  metrics["best_epoch"] = r.best_epoch;
  metrics["best_val_mse"] = r.best_val_mse;
  metrics["stopped_early"] = r.stopped_early;
  metrics["parameters"] = summary.parameters;
  metrics["trainable_parameters"] = summary.trainable;
  metrics["test"] = summary.test.to_json();
  write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
  return summary;
}

std::vector<AblationRun> ablation_runs(const RunConfig& base, const std::string& variant) {
  std::vector<AblationRun> runs;
  if (variant == "n_sweep") {
    for (std::size_t n = 0; n <= 8; ++n) {
      RunConfig c = base;
      c.model.num_layers = n;
      runs.push_back({"N" + std::to_string(n), c});
    }
  } else if (variant == "no_merge") {
    RunConfig c = base;
    c.model.merge_trainable = false;
    runs.push_back({"no_merge", c});
  } else if (variant == "R1") {
    RunConfig c = base;
    c.model.conv_specs = {Conv1DSpec{3, 1}};
    runs.push_back({"R1", c});
  } else if (variant == "R0") {
    RunConfig c = base;
    c.model.conv_specs = {Conv1DSpec{1, 1, 1}};
    runs.push_back({"R0", c});
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "' (expected n_sweep, no_merge, R1, R0 or all)");
  }
  for (auto& r : runs) r.config.model.validate(true);
  return runs;
}

namespace {

struct Options {
  std::string config;
  std::vector<std::string> checkpoints;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t jobs = 1;
  bool force_ranges = false;
  double threshold = 0.85;
  std::string split = "test";
  std::size_t window = 0;
  bool per_head = false;
  std::vector<double> ratios;
  std::vector<std::string> variants;
};

int cmd_train(const Options& o) {
  RunConfig cfg = load_run_config(o.config, o.force_ranges);
  if (o.seed_set) cfg.seed = cfg.train.seed = o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  SeriesDataset ds = load_dataset(cfg);
  RunSummary s = run_training(cfg, ds, cfg.out, true);
  std::cout << "best_epoch " << s.result.best_epoch << " best_val_mse " << s.result.best_val_mse << "\n"
            << "test_mse " << s.test.mse << " test_mae " << s.test.mae << "\n"
            << "checkpoint " << s.checkpoint.string() << "\n";
  return kExitOk;
}

// Datasets are cached by their resolved description so several checkpoints
// trained on the same data share one load.
class DatasetCache {
 public:
  const SeriesDataset& get(RunConfig& cfg) {
    const std::string key = to_json(cfg.data).dump();
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, load_dataset(cfg)).first;
    cfg.model.features = it->second.features();
    return it->second;
  }

 private:
  std::map<std::string, SeriesDataset> cache_;
};

struct Loaded {
  Checkpoint ckpt;
  RunConfig run;
  TsrmModel model;
  const SeriesDataset* ds = nullptr;
};

Loaded load_for_eval(const std::string& path, const Options& o, DatasetCache& cache) {
  Loaded l;
  l.ckpt = read_checkpoint(fs::path(path));
  l.run = run_from_checkpoint(l.ckpt);
  l.model = restore_model(l.ckpt, true);
  if (!o.config.empty()) {
    RunConfig over = load_run_config(o.config, true);
    l.ds = &cache.get(over);
    if (to_json(over.model).dump() != to_json(l.ckpt.config).dump()) {
      throw ConfigError("checkpoint " + path + " was trained with a different model config than " + o.config);
    }
    l.run.data = over.data;
  } else {
    l.ds = &cache.get(l.run);
  }
  if (l.ds->features() != l.ckpt.config.features) {
    throw ConfigError("checkpoint " + path + " expects " + std::to_string(l.ckpt.config.features) +
                      " features, dataset has " + std::to_string(l.ds->features()));
  }
  return l;
}

int cmd_eval(const Options& o) {
  const Split split = split_from_string(o.split);
  DatasetCache cache;
  std::vector<EvalRecord> rows;
  for (const auto& path : o.checkpoints) {
    Loaded l = load_for_eval(path, o, cache);
    EvalOptions eo = eval_options(l.run.train);
    if (o.seed_set) eo.seed = o.seed;
    const int epoch = l.ckpt.meta.value("best_epoch", -1);
    const std::string hash = l.ckpt.meta.value("config_hash", std::string());
    auto finish = [&](EvalRecord r, const std::string& setting) {
      r.split = to_string(split);
      r.setting = setting;
      r.epoch = epoch;
      r.config_hash = hash;
      rows.push_back(r);
    };
    if (l.run.task == Task::kForecast) {
      eo.horizon = l.ckpt.config.horizon;
      finish(evaluate(l.model, *l.ds, split, Task::kForecast, eo), std::to_string(eo.horizon));
    } else {
      std::vector<double> ratios = !o.ratios.empty() ? o.ratios : l.run.ratios;
      if (ratios.empty()) ratios.push_back(l.run.train.missing_ratio);
      for (double r : ratios) {
        if (!(r > 0 && r < 1)) throw ConfigError("ratios must lie in (0, 1), got " + format_double(r));
        eo.missing_ratio = r;
        finish(evaluate(l.model, *l.ds, split, Task::kImpute, eo), format_double(r));
      }
    }
  }
  if (rows.size() > 1) {
    EvalRecord avg = average(rows);
    avg.split = to_string(split);
    rows.push_back(avg);
  }
  std::string csv = EvalRecord::csv_header() + "\n";
  ordered_json j = ordered_json::array();
  for (const auto& r : rows) {
    csv += r.csv_row() + "\n";
    j.push_back(r.to_json());
  }
  std::cout << csv;
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text(fs::path(o.out) / "eval.csv", csv);
    write_text(fs::path(o.out) / "eval.json", j.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_explain(const Options& o) {
  if (o.checkpoints.size() != 1) throw ConfigError("explain takes exactly one --checkpoint");
  if (!(o.threshold >= 0 && o.threshold <= 1)) throw ConfigError("--threshold must lie in [0, 1]");
  DatasetCache cache;
  Loaded l = load_for_eval(o.checkpoints.front(), o, cache);
  const ModelConfig& mc = l.ckpt.config;
  const Split split = split_from_string(o.split);
  const auto starts = window_starts(*l.ds, split, mc.lookback, mc.horizon, l.run.task, 1);
  if (o.window >= starts.size()) {
    throw ConfigError("window " + std::to_string(o.window) + " out of range: the " + to_string(split) + " split has " +
                      std::to_string(starts.size()) + " windows");
  }
  const std::size_t start = starts[o.window];
  WindowBatch wb = gather_windows(*l.ds, {start}, mc.lookback, mc.horizon, l.run.task);
  Tensor x = wb.inputs.reshaped({mc.lookback, mc.features});

  ExplainOptions eo;
  eo.threshold = o.threshold;
  eo.per_head = o.per_head;
  eo.feature_names = l.ds->columns;
  eo.window_start = start;
  Tensor mask;
  if (l.run.task == Task::kImpute) {
    const std::uint64_t seed = o.seed_set ? o.seed : l.run.train.seed;
    mask = window_mask(start, mc.lookback, mc.features, l.run.train.missing_ratio, seed);
    x = apply_mask(x, mask);
    eo.mask = &mask;
  }
  AttentionReport report = explain_window(l.model, x, eo);

  const fs::path out = o.out.empty() ? fs::path("explain") : fs::path(o.out);
  fs::create_directories(out);
  write_text(out / "explain.json", to_json(report).dump(2) + "\n");
  for (std::size_t f = 0; f < report.features.size(); ++f) {
    const auto& fr = report.features[f];
    const fs::path csv = out / ("explain_" + std::to_string(f) + "_" + file_safe(fr.name) + ".csv");
    write_text(csv, to_csv(report, f));
    std::cout << csv_field(fr.name) << ": " << fr.highlights.size() << " of " << report.lookback
              << " positions highlighted -> " << csv.string() << "\n";
  }
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  RunConfig base = load_run_config(o.config, o.force_ranges);
  if (o.seed_set) base.seed = base.train.seed = o.seed;
  if (!o.out.empty()) base.out = o.out;
  const SeriesDataset ds = load_dataset(base);

  std::vector<std::string> variants = o.variants;
  if (variants.empty()) throw ConfigError("ablate needs at least one --variant");
  if (variants.size() == 1 && variants.front() == "all") variants = {"n_sweep", "no_merge", "R1", "R0"};
  std::vector<AblationRun> runs;
  bool need_base = false;
  for (const auto& v : variants) {
    if (v != "n_sweep") need_base = true;
    auto more = ablation_runs(base, v);
    runs.insert(runs.end(), more.begin(), more.end());
  }
  if (need_base) runs.insert(runs.begin(), AblationRun{"base", base});

  std::vector<RunSummary> results(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  std::mutex io;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        results[i] = run_training(runs[i].config, ds, fs::path(base.out) / runs[i].variant, false);
        std::lock_guard<std::mutex> lock(io);
        std::cout << runs[i].variant << ": best_val_mse " << results[i].result.best_val_mse << " test_mse "
                  << results[i].test.mse << std::endl;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(o.jobs, runs.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::string csv =
      "variant,num_layers,conv_specs,merge_trainable,parameters,trainable_parameters,best_epoch,best_val_mse,"
      "test_mse,test_mae\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& m = runs[i].config.model;
    const auto& r = results[i];
    std::ostringstream row;
    row.precision(17);
    row << runs[i].variant << ',' << m.num_layers << ',' << conv_layout(m) << ',' << (m.merge_trainable ? 1 : 0)
        << ',' << r.parameters << ',' << r.trainable << ',' << r.result.best_epoch << ',' << r.result.best_val_mse
        << ',' << r.test.mse << ',' << r.test.mae << "\n";
    csv += row.str();
  }
  write_text(fs::path(base.out) / "ablation.csv", csv);
  std::cout << csv;
  return kExitOk;
}

int cmd_count_params(const Options& o) {
  ModelConfig mc;
  if (!o.checkpoints.empty()) {
    mc = read_checkpoint(fs::path(o.checkpoints.front())).config;
  } else if (!o.config.empty()) {
    RunConfig cfg = load_run_config(o.config, o.force_ranges);
    if (!cfg.features_given) {
      if (cfg.data.synthetic) {
        cfg.model.features = cfg.data.synthetic->channels;
      } else if (auto info = known_dataset(cfg.data.name); info && cfg.data.registry.empty()) {
        cfg.model.features = info->channels;
      } else {
        load_dataset(cfg);
      }
    }
    mc = cfg.model;
  } else {
    throw ConfigError("count-params needs --config or --checkpoint");
  }
  TsrmModel model(mc, true);
  std::map<std::string, std::size_t> groups;
  for (const auto* p : model.parameters()) {
    if (!p->trainable) continue;
    std::string key = p->name.substr(0, p->name.find('.'));
    if (key == "el") key = p->name.substr(0, p->name.find('.', 3));
    groups[key] += p->value.size();
  }
  ordered_json j;
  j["parameters"] = total_parameters(model);
  j["trainable_parameters"] = count_parameters(model);
  j["by_component"] = groups;
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text(fs::path(o.out) / "params.json", j.dump(2) + "\n");
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"TSRM: time series representation model"};
  app.name("tsrm");
  app.require_subcommand(1);
  Options o;

  auto seed_opt = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { o.seed = s, o.seed_set = true; }, "override the run seed");
  };
  auto* train = app.add_subcommand("train", "train a model and write checkpoint, history and resolved config");
  train->add_option("--config", o.config, "run config (JSON)")->required();
  train->add_option("--out", o.out, "output directory (overrides config.out)");
  train->add_flag("--force-ranges", o.force_ranges, "allow hyperparameters outside the search ranges");
  seed_opt(train);

  auto* eval = app.add_subcommand("eval", "evaluate checkpoints; one row per horizon or missing ratio plus AVG");
  eval->add_option("--checkpoint", o.checkpoints, "checkpoint file, repeatable")->required();
  eval->add_option("--config", o.config, "run config overriding the dataset stored in the checkpoint");
  eval->add_option("--split", o.split, "train, val or test")->capture_default_str();
  eval->add_option("--ratios", o.ratios, "missing ratios for imputation checkpoints")->delimiter(',');
  eval->add_option("--out", o.out, "directory for eval.csv / eval.json");
  seed_opt(eval);

  auto* explain = app.add_subcommand("explain", "attention report for one window");
  explain->add_option("--checkpoint", o.checkpoints, "checkpoint file")->required();
  explain->add_option("--config", o.config, "run config overriding the dataset stored in the checkpoint");
  explain->add_option("--window", o.window, "window index within the split")->capture_default_str();
  explain->add_option("--split", o.split, "train, val or test")->capture_default_str();
  explain->add_option("--threshold", o.threshold, "highlight threshold on the combined map")->capture_default_str();
  explain->add_flag("--per-head", o.per_head, "also export per-head maps");
  explain->add_option("--out", o.out, "output directory")->capture_default_str();
  seed_opt(explain);

  auto* ablate = app.add_subcommand("ablate", "train and compare ablation variants of a base config");
  ablate->add_option("--config", o.config, "base run config")->required();
  ablate->add_option("--variant", o.variants, "n_sweep, no_merge, R1, R0 or all; repeatable")->required();
  ablate->add_option("--out", o.out, "output directory");
  ablate->add_option("--jobs", o.jobs, "parallel training runs")->capture_default_str()->check(CLI::PositiveNumber);
  ablate->add_flag("--force-ranges", o.force_ranges, "allow hyperparameters outside the search ranges");
  seed_opt(ablate);

  auto* count = app.add_subcommand("count-params", "print parameter counts");
  count->add_option("--config", o.config, "run config");
  count->add_option("--checkpoint", o.checkpoints, "checkpoint file");
  count->add_option("--out", o.out, "directory for params.json");
  count->add_flag("--force-ranges", o.force_ranges, "allow hyperparameters outside the search ranges");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (explain->parsed()) return cmd_explain(o);
    if (ablate->parsed()) return cmd_ablate(o);
    if (count->parsed()) return cmd_count_params(o);
  } catch (const DataError& e) {
    std::cerr << "tsrm: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "tsrm: numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "tsrm: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const json::exception& e) {
    std::cerr << "tsrm: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "tsrm: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "tsrm: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitConfig;
}

}  // namespace tsrm
