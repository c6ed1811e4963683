#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ratnet/cli.hpp"
#include "ratnet/training.hpp"
#include "ratnet/transfer.hpp"

namespace py = pybind11;
using namespace ratnet;

namespace {

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> a({t.rows(), t.cols()});
  auto d = t.data();
  std::copy(d.begin(), d.end(), a.mutable_data());
  return a;
}

Tensor from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor::matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::tuple counts_tuple(const SplitCounts& c) { return py::make_tuple(c.train, c.val, c.test); }
SplitCounts counts_from(const py::tuple& t) {
  if (t.size() != 3) throw ConfigError("split counts take (train, val, test)");
  return {t[0].cast<std::size_t>(), t[1].cast<std::size_t>(), t[2].cast<std::size_t>()};
}

std::vector<TaskInfo> infos_of(const std::vector<Dataset>& ds) {
  std::vector<TaskInfo> out;
  for (const auto& d : ds) out.push_back({d.task_id, d.num_classes()});
  return out;
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["macro_auc"] = r.macro.auc;
  d["macro_auc_ci"] = py::make_tuple(r.macro_auc_ci.lower, r.macro_auc_ci.upper);
  d["macro_f1"] = r.macro.f1;
  d["macro_ap"] = r.macro.ap;
  d["macro_mcc"] = r.macro.mcc;
  d["accuracy"] = r.accuracy;
  py::dict per;
  for (std::size_t k = 0; k < r.class_ids.size(); ++k) per[py::int_(r.class_ids[k])] = r.per_class[k].auc;
  d["per_class_auc"] = per;
  return d;
}

}  // namespace

PYBIND11_MODULE(_ratnet, m) {
  m.doc() = "Relevance-weighted knowledge transfer on synthetic multi-domain data";

  static py::exception<Error> error(m, "RatnetError", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::set_error(config_error, e.what());
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<BenchmarkConfig>(m, "BenchmarkConfig")
      .def(py::init<>())
      .def_readwrite("dim", &BenchmarkConfig::dim)
      .def_readwrite("pretrain_tasks", &BenchmarkConfig::pretrain_tasks)
      .def_readwrite("classes_per_task", &BenchmarkConfig::classes_per_task)
      .def_readwrite("noise", &BenchmarkConfig::noise)
      .def_readwrite("rotation_strength", &BenchmarkConfig::rotation_strength)
      .def_readwrite("scale_spread", &BenchmarkConfig::scale_spread)
      .def_readwrite("bias_scale", &BenchmarkConfig::bias_scale)
      .def_readwrite("zeroshot_classes", &BenchmarkConfig::zeroshot_classes)
      .def_readwrite("fewshot_classes", &BenchmarkConfig::fewshot_classes)
      .def_readwrite("longtail_classes", &BenchmarkConfig::longtail_classes)
      .def_readwrite("longtail_rho", &BenchmarkConfig::longtail_rho)
      .def_readwrite("seed", &BenchmarkConfig::seed)
      .def_property(
          "pretrain_counts", [](const BenchmarkConfig& c) { return counts_tuple(c.pretrain_counts); },
          [](BenchmarkConfig& c, const py::tuple& t) { c.pretrain_counts = counts_from(t); })
      .def_property(
          "zeroshot_counts", [](const BenchmarkConfig& c) { return counts_tuple(c.zeroshot_counts); },
          [](BenchmarkConfig& c, const py::tuple& t) { c.zeroshot_counts = counts_from(t); })
      .def_property(
          "fewshot_counts", [](const BenchmarkConfig& c) { return counts_tuple(c.fewshot_counts); },
          [](BenchmarkConfig& c, const py::tuple& t) { c.fewshot_counts = counts_from(t); })
      .def_property(
          "longtail_counts", [](const BenchmarkConfig& c) { return counts_tuple(c.longtail_counts); },
          [](BenchmarkConfig& c, const py::tuple& t) { c.longtail_counts = counts_from(t); });

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("task_id", &Dataset::task_id)
      .def_readonly("dim", &Dataset::dim)
      .def_readonly("concept_subset", &Dataset::concept_subset)
      .def_property_readonly("num_classes", &Dataset::num_classes)
      .def("size", [](const Dataset& d, const std::string& split) { return d.split(parse_split(split)).size(); },
           py::arg("split") = "train")
      .def(
          "features",
          [](const Dataset& d, const std::string& split) { return to_array(features_matrix(d.split(parse_split(split)))); },
          py::arg("split") = "train")
      .def(
          "labels", [](const Dataset& d, const std::string& split) { return labels_of(d.split(parse_split(split))); },
          py::arg("split") = "train")
      .def("checksum", &Dataset::checksum)
      .def("save", [](const Dataset& d, const std::string& path) { write_dataset_csv(d, path); })
      .def_static("load", [](const std::string& path) { return read_dataset_csv(path); });

  py::class_<Benchmark>(m, "Benchmark")
      .def_readonly("pretraining", &Benchmark::pretraining)
      .def_readonly("zero_shot", &Benchmark::zero_shot)
      .def_readonly("few_shot", &Benchmark::few_shot)
      .def_readonly("long_tail", &Benchmark::long_tail)
      .def("manifest", &Benchmark::manifest);
  m.def("make_benchmark", &make_benchmark, py::arg("config") = BenchmarkConfig{});

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_property(
          "input_dim", [](const ModelConfig& c) { return c.encoder.input_dim; },
          [](ModelConfig& c, std::size_t v) { c.encoder.input_dim = v; })
      .def_property(
          "embedding_dim", [](const ModelConfig& c) { return c.encoder.embedding_dim; },
          [](ModelConfig& c, std::size_t v) { c.encoder.embedding_dim = v; })
      .def_property(
          "depth", [](const ModelConfig& c) { return c.encoder.depth; },
          [](ModelConfig& c, std::size_t v) { c.encoder.depth = v; })
      .def_property(
          "hidden", [](const ModelConfig& c) { return c.encoder.hidden; },
          [](ModelConfig& c, std::size_t v) { c.encoder.hidden = v; })
      .def_readwrite("knowledge_dim", &ModelConfig::knowledge_dim)
      .def_readwrite("tau", &ModelConfig::tau);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_property(
          "learning_rate", [](const TrainConfig& c) { return c.sgd.learning_rate; },
          [](TrainConfig& c, double v) { c.sgd.learning_rate = v; })
      .def_property(
          "batch_size", [](const TrainConfig& c) { return c.sgd.batch_size; },
          [](TrainConfig& c, std::size_t v) { c.sgd.batch_size = v; })
      .def_property(
          "loss_weights", [](const TrainConfig& c) { return py::make_tuple(c.weights.ce, c.weights.ts, c.weights.orth, c.weights.cons); },
          [](TrainConfig& c, const std::tuple<double, double, double, double>& w) {
            c.weights = {std::get<0>(w), std::get<1>(w), std::get<2>(w), std::get<3>(w)};
          })
      .def_readwrite("ema_momentum", &TrainConfig::ema_momentum)
      .def_readwrite("augment_sigma", &TrainConfig::augment_sigma)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<ModelState>(m, "Model")
      .def_static(
          "create",
          [](ModelConfig config, const std::vector<Dataset>& tasks, std::uint64_t seed) {
            if (tasks.empty()) throw ConfigError("at least one task is required");
            config.encoder.input_dim = tasks.front().dim;
            return ModelState::create(config, infos_of(tasks), seed);
          },
          py::arg("config"), py::arg("tasks"), py::arg("seed") = 42)
      .def_property_readonly("task_ids", &ModelState::task_ids)
      .def("checksum", &ModelState::checksum)
      .def("save", [](const ModelState& s, const std::string& path) { checkpoint_save(s, path); })
      .def_static("load", [](const std::string& path) { return checkpoint_load(path); })
      .def("to_bytes", [](const ModelState& s) { return py::bytes(checkpoint_bytes(s)); })
      .def_static("from_bytes", [](const py::bytes& b) { return checkpoint_from_bytes(std::string(b)); })
      .def("embed", [](const ModelState& s, const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return to_array(embed(s, from_array(x)));
      })
      .def("relevance", [](const ModelState& s, const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
                           const std::string& task_id) {
        NoGradGuard guard;
        return to_array(forward(s, from_array(x), task_id).weights.omegas);
      })
      .def(
          "accuracy",
          [](const ModelState& s, const Dataset& d, const std::string& split) {
            return task_accuracy(s, d.task_id, d.split(parse_split(split)));
          },
          py::arg("dataset"), py::arg("split") = "test");

  m.def(
      "pretrain",
      [](const ModelState& student, const std::vector<Dataset>& tasks, const TrainConfig& config) {
        PretrainResult r = [&] {
          py::gil_scoped_release release;
          return cyclic_pretrain(student, tasks, config);
        }();
        return py::make_tuple(std::move(r.student), std::move(r.teacher), r.log.to_csv());
      },
      py::arg("student"), py::arg("tasks"), py::arg("config") = TrainConfig{},
      "Cyclic teacher-student pretraining; returns (student, teacher, run log csv).");

  m.def("category_map", [](const std::vector<Dataset>& pretraining, const Dataset& target) {
    return alignment_by_concept(pretraining, target).to_text();
  });
  m.def(
      "zero_shot",
      [](const ModelState& s, const Dataset& d, const std::string& map_text, std::size_t resamples,
         std::uint64_t seed) {
        const auto ev = zero_shot_evaluate(s, d, CategoryMap::parse(map_text), {}, {resamples, 0.95, seed});
        return report_dict(ev.metrics);
      },
      py::arg("model"), py::arg("dataset"), py::arg("category_map"), py::arg("resamples") = 0, py::arg("seed") = 0);
  m.def(
      "few_shot",
      [](const ModelState& s, const Dataset& d, std::size_t k, std::size_t runs, std::uint64_t seed) {
        return few_shot_protocol(s, d, k, runs, seed, ProbeConfig{}).aucs;
      },
      py::arg("model"), py::arg("dataset"), py::arg("k"), py::arg("runs") = 100, py::arg("seed") = 42);
  m.def(
      "linear_probe",
      [](const ModelState& s, const Dataset& d) {
        return report_dict(linear_probe(s, d.train, d.test, d.concept_subset, ProbeConfig{}).metrics);
      },
      py::arg("model"), py::arg("dataset"));

  m.def("auc", [](std::vector<double> scores, std::vector<int> labels) { return auc({scores, labels}); });
  m.def("average_precision",
        [](std::vector<double> scores, std::vector<int> labels) { return average_precision({scores, labels}); });
  m.def("f1_score", [](const std::vector<int>& pred, const std::vector<int>& labels) { return f1_score(pred, labels); });
  m.def("mcc", [](const std::vector<int>& pred, const std::vector<int>& labels) { return mcc(pred, labels); });
  m.def("welch_t_test", [](const std::vector<double>& a, const std::vector<double>& b) {
    const auto r = welch_t_test(a, b);
    return py::make_tuple(r.t, r.p, r.df);
  });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      "Runs a CLI command in-process; returns (exit code, stdout, stderr).");
}
