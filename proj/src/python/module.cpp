#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "eocount/commands.hpp"
#include "eocount/config.hpp"
#include "eocount/io.hpp"
#include "eocount/metrics.hpp"
#include "eocount/model.hpp"
#include "eocount/scenegen.hpp"

namespace py = pybind11;
using namespace eoc;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  const auto src = t.data();
  std::copy(src.begin(), src.end(), out.mutable_data());
  return out;
}

// [H, W] or [1, H, W] numpy image -> [1, H, W] tensor
Tensor image_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() == 2) {
    const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1));
    return Tensor::from({1, h, w}, std::vector<double>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() == 3 && a.shape(0) == 1) {
    const auto h = static_cast<std::size_t>(a.shape(1)), w = static_cast<std::size_t>(a.shape(2));
    return Tensor::from({1, h, w}, std::vector<double>(a.data(), a.data() + a.size()));
  }
  throw py::value_error("image must have shape (H, W) or (1, H, W)");
}

py::dict sample_dict(const Sample& s) {
  py::dict d;
  d["image"] = to_numpy(s.image);
  d["density"] = to_numpy(s.density);
  d["mask"] = to_numpy(s.mask);
  d["count"] = s.count;
  d["class_id"] = s.class_id;
  d["seed"] = s.seed;
  std::vector<std::pair<double, double>> dots;
  for (const auto& p : s.dots) dots.emplace_back(p.row, p.col);
  d["dots"] = dots;
  return d;
}

ExperimentConfig config_from(const std::string& text, const std::optional<std::string>& profile,
                             std::optional<std::uint64_t> seed) {
  auto cfg = make_config(parse_key_values(text), profile);
  if (seed) cfg.bench.base_seed = cfg.train.seed = *seed;
  return cfg;
}

std::vector<std::string> artifacts(const Manifest& m) { return m.artifacts; }

}  // namespace

PYBIND11_MODULE(_eocount, m) {
  m.doc() = "Class-incremental object counting: native core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);

  m.def(
      "generate_sample",
      [](int class_id, std::uint64_t seed, int counting_classes, std::size_t image_size) {
        const auto specs = default_class_specs(counting_classes);
        if (class_id < 0 || class_id > counting_classes) throw py::value_error("class_id out of range");
        SceneParams p;
        p.height = p.width = image_size;
        return sample_dict(generate_sample(specs[static_cast<std::size_t>(class_id)], seed, p));
      },
      py::arg("class_id"), py::arg("seed"), py::arg("counting_classes") = 4, py::arg("image_size") = 64);

  m.def(
      "downsample_density",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& density, int factor) {
        return to_numpy(downsample_density(image_from_numpy(density), factor));
      },
      py::arg("density"), py::arg("factor") = 4);

  m.def(
      "config_text",
      [](const std::string& text, std::optional<std::string> profile, std::optional<std::uint64_t> seed) {
        return config_from(text, profile, seed).to_text();
      },
      py::arg("text") = "", py::arg("profile") = py::none(), py::arg("seed") = py::none(),
      "Canonical key=value form of a config after defaults and validation.");

  py::class_<ModelState>(m, "Model")
      .def_static(
          "initial",
          [](const std::string& profile, std::uint64_t seed) {
            return build_initial(ExperimentConfig::for_profile(profile).arch, seed);
          },
          py::arg("profile") = "desk", py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
      .def("save", [](const ModelState& s, const std::filesystem::path& p) { save_checkpoint(p, s); })
      .def("expand", [](const ModelState& s, std::uint64_t seed) { return expand(s, seed); }, py::arg("seed") = 0)
      .def_readonly("stage", &ModelState::stage)
      .def_property_readonly("num_outputs", &ModelState::num_outputs)
      .def_property_readonly("parameter_count", &ModelState::parameter_count)
      .def("forward",
           [](const ModelState& s, const py::array_t<double, py::array::c_style | py::array::forcecast>& image) {
             NoGradGuard g;
             const auto out = forward(s, image_from_numpy(image));
             py::dict d;
             d["density"] = to_numpy(out.density);
             d["logits"] = to_numpy(out.logits);
             d["mask_prob"] = out.mask_prob.defined() ? py::object(to_numpy(out.mask_prob)) : py::none();
             d["feature_vec"] = to_numpy(out.feature_vec);
             return d;
           })
      .def("predict_count",
           [](const ModelState& s, const py::array_t<double, py::array::c_style | py::array::forcecast>& image) {
             const auto p = predict_count(s, image_from_numpy(image));
             return py::make_tuple(p.class_id, p.count);
           });

  m.def(
      "train",
      [](const std::string& text, const std::filesystem::path& out, std::optional<std::string> profile,
         std::optional<std::uint64_t> seed) {
        const auto cfg = config_from(text, profile, seed);
        py::gil_scoped_release release;
        return artifacts(cmd_train(cfg, out));
      },
      py::arg("config"), py::arg("out"), py::arg("profile") = py::none(), py::arg("seed") = py::none(),
      "Runs the configured method; returns the artifacts written under `out`.");

  m.def(
      "evaluate",
      [](const std::string& text, const std::filesystem::path& checkpoint, const std::filesystem::path& out,
         std::optional<std::string> profile, std::optional<std::uint64_t> seed) {
        const auto cfg = config_from(text, profile, seed);
        py::gil_scoped_release release;
        return artifacts(cmd_eval(cfg, checkpoint, out));
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("out"), py::arg("profile") = py::none(),
      py::arg("seed") = py::none());

  m.def(
      "grad_check",
      [](int seeds, std::uint64_t base_seed) {
        GradSuiteOptions o;
        o.seeds = seeds;
        o.base_seed = base_seed;
        std::vector<GradSuiteRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_grad_suite(o);
        }
        py::list out;
        for (const auto& r : rows) {
          py::dict d;
          d["op"] = r.op;
          d["checked"] = r.checked;
          d["max_rel_error"] = r.max_rel_error;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("seeds") = 20, py::arg("base_seed") = 0);

  m.def(
      "mae",
      [](const std::vector<std::pair<double, double>>& pairs) {
        std::vector<CountPair> p;
        for (const auto& [z, zh] : pairs) p.push_back({z, zh});
        return mae(p);
      },
      py::arg("pairs"));
  m.def(
      "mse",
      [](const std::vector<std::pair<double, double>>& pairs) {
        std::vector<CountPair> p;
        for (const auto& [z, zh] : pairs) p.push_back({z, zh});
        return mse(p);
      },
      py::arg("pairs"), "Root mean squared count error.");
}
