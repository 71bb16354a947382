#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tsrm/checkpoint.hpp"
#include "tsrm/cli.hpp"
#include "tsrm/error.hpp"
#include "tsrm/explain.hpp"
#include "tsrm/ops.hpp"
#include "tsrm/training.hpp"

namespace py = pybind11;
using namespace tsrm;
using nlohmann::json;

namespace {

using Array = py::array_t<real, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<real>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Configs cross the boundary as JSON text; the Python wrapper turns them into dicts.
ModelConfig model_config(const std::string& text) { return model_config_from_json(json::parse(text)); }

std::string history_json(const History& h) {
  json j = json::array();
  for (const auto& e : h.epochs) {
    j.push_back({{"epoch", e.epoch},
                 {"train_loss", e.train_loss},
                 {"val_mse", e.val_mse},
                 {"val_mae", e.val_mae},
                 {"lr", e.lr},
                 {"seconds", e.seconds}});
  }
  return j.dump();
}

}  // namespace

PYBIND11_MODULE(_tsrm, m) {
  m.doc() = "TSRM core bindings";

  py::register_exception<Error>(m, "TsrmError");
  py::register_exception<ConfigError>(m, "ConfigError", m.attr("TsrmError"));
  py::register_exception<DimensionError>(m, "DimensionError", m.attr("TsrmError"));
  py::register_exception<DataError>(m, "DataError", m.attr("TsrmError"));
  py::register_exception<NumericError>(m, "NumericError", m.attr("TsrmError"));
  py::register_exception<ContractError>(m, "ContractError", m.attr("TsrmError"));

  m.attr("real_bits") = sizeof(real) * 8;

  py::enum_<Task>(m, "Task").value("forecast", Task::kForecast).value("impute", Task::kImpute);
  py::enum_<Split>(m, "Split").value("train", Split::kTrain).value("val", Split::kVal).value("test", Split::kTest);

  py::class_<SeriesDataset>(m, "SeriesDataset")
      .def_readonly("name", &SeriesDataset::name)
      .def_readonly("columns", &SeriesDataset::columns)
      .def_readonly("train_end", &SeriesDataset::train_end)
      .def_readonly("val_end", &SeriesDataset::val_end)
      .def_readonly("mean", &SeriesDataset::mean)
      .def_readonly("stdev", &SeriesDataset::stdev)
      .def_property_readonly("values", [](const SeriesDataset& d) { return to_array(d.values); })
      .def_property_readonly("features", &SeriesDataset::features)
      .def("__len__", &SeriesDataset::length);

  m.def(
      "synthetic_sine",
      [](std::size_t length, std::size_t channels, double noise, std::uint64_t seed) {
        return synthetic_sine(SineSpec{length, channels, noise, seed});
      },
      py::arg("length") = 2400, py::arg("channels") = 2, py::arg("noise") = 0.1, py::arg("seed") = 0);
  m.def("load_csv", [](const std::filesystem::path& p, const std::string& name) { return load_csv(p, name); },
        py::arg("path"), py::arg("name") = "");
  m.def(
      "split_and_standardize",
      [](SeriesDataset& ds, std::optional<std::size_t> train, std::optional<std::size_t> val,
         std::optional<std::size_t> test, bool standardize) {
        SplitSpec s;
        s.train = train;
        s.val = val;
        s.test = test;
        s.standardize = standardize;
        split_and_standardize(ds, s);
      },
      py::arg("dataset"), py::arg("train") = py::none(), py::arg("val") = py::none(), py::arg("test") = py::none(),
      py::arg("standardize") = true);

  py::class_<TsrmModel>(m, "Model")
      .def(py::init([](const std::string& cfg, bool force_ranges) { return TsrmModel(model_config(cfg), force_ranges); }),
           py::arg("config_json"), py::arg("force_ranges") = false)
      .def(
          "init", [](TsrmModel& self, std::uint64_t seed) {
            Rng rng(seed);
            self.init(rng);
          },
          py::arg("seed") = 0)
      .def("config_json", [](const TsrmModel& self) { return to_json(self.config()).dump(); })
      .def("count_parameters", &TsrmModel::count_parameters)
      .def(
          "forward",
          [](TsrmModel& self, const Array& x, std::optional<Array> mask) {
            Tape tape(false);
            ForwardOptions o;
            Tensor mt;
            if (mask) {
              mt = to_tensor(*mask);
              o.mask = &mt;
            }
            return to_array(self.forward(tape, to_tensor(x), o).output.value());
          },
          py::arg("x"), py::arg("mask") = py::none())
      .def("parameters",
           [](const TsrmModel& self) {
             py::dict out;
             for (const auto* p : self.parameters()) out[py::str(p->name)] = to_array(p->value);
             return out;
           })
      .def("save", [](const TsrmModel& self, const std::filesystem::path& p) { save_checkpoint(p, self); })
      .def_static("load", [](const std::filesystem::path& p) { return restore_model(read_checkpoint(p), true); });

  m.def(
      "train",
      [](TsrmModel& model, const SeriesDataset& ds, Task task, const std::string& cfg) {
        TrainConfig tc = train_config_from_json(json::parse(cfg));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(model, ds, task, tc);
        }
        return py::make_tuple(history_json(r.history), r.best_epoch, r.best_val_mse, r.stopped_early);
      },
      py::arg("model"), py::arg("dataset"), py::arg("task"), py::arg("train_config_json") = "{}");
  m.def(
      "evaluate",
      [](TsrmModel& model, const SeriesDataset& ds, Split split, Task task, double missing_ratio, std::uint64_t seed,
         std::size_t max_windows) {
        EvalOptions o;
        o.missing_ratio = missing_ratio;
        o.seed = seed;
        o.max_windows = max_windows;
        return evaluate(model, ds, split, task, o).to_json().dump();
      },
      py::arg("model"), py::arg("dataset"), py::arg("split") = Split::kTest, py::arg("task") = Task::kForecast,
      py::arg("missing_ratio") = 0.25, py::arg("seed") = 0, py::arg("max_windows") = 0);

  m.def(
      "forecast_loss",
      [](const Array& yhat, const Array& y) {
        Tape t(false);
        return forecast_loss(t.constant(to_tensor(yhat)), t.constant(to_tensor(y))).value()[0];
      },
      py::arg("yhat"), py::arg("y"));
  m.def(
      "imputation_loss",
      [](const Array& yhat, const Array& y, const Array& mask, double rm, bool single) {
        Tape t(false);
        return imputation_loss(t.constant(to_tensor(yhat)), t.constant(to_tensor(y)), to_tensor(mask), rm, single)
            .value()[0];
      },
      py::arg("yhat"), py::arg("y"), py::arg("mask"), py::arg("missing_ratio"), py::arg("single_rm_weighting") = false);
  m.def(
      "generate_mask",
      [](std::size_t length, std::size_t features, double rm, std::uint64_t seed) {
        return to_array(generate_mask(length, features, rm, seed).m);
      },
      py::arg("length"), py::arg("features"), py::arg("missing_ratio"), py::arg("seed") = 0);
  m.def("entmax15", [](const std::vector<real>& z) { return nn::entmax15(z); }, py::arg("logits"));
  m.def(
      "conv1d_out_len",
      [](std::size_t len, std::size_t kernel, std::size_t dilation, std::size_t stride) {
        return conv1d_out_len(len, Conv1DSpec{kernel, dilation, stride});
      },
      py::arg("length"), py::arg("kernel_size"), py::arg("dilation") = 1, py::arg("stride") = 0);
  m.def(
      "explain",
      [](TsrmModel& model, const Array& x, double threshold, bool per_head) {
        ExplainOptions o;
        o.threshold = threshold;
        o.per_head = per_head;
        return to_json(explain_window(model, to_tensor(x), o)).dump();
      },
      py::arg("model"), py::arg("x"), py::arg("threshold") = 0.85, py::arg("per_head") = false);
  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "tsrm");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        py::gil_scoped_release release;
        return run_cli(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"));
}
