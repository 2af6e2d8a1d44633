#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "elnet/config.hpp"
#include "elnet/error.hpp"
#include "elnet/lqe.hpp"
#include "elnet/maskio.hpp"
#include "elnet/perturb.hpp"
#include "elnet/pipeline.hpp"
#include "elnet/synth.hpp"

namespace py = pybind11;
using namespace elnet;
using maskio::GrayImage;
using maskio::Mask;

namespace {

using MaskArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using ImageArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Mask to_mask(const MaskArray& a) {
  if (a.ndim() != 2) throw ShapeError("mask: expected a 2-D array");
  const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1));
  std::vector<std::uint8_t> bits(a.data(), a.data() + h * w);
  for (auto& b : bits) b = b != 0;
  return Mask(h, w, std::move(bits));
}

MaskArray from_mask(const Mask& m) {
  MaskArray out({m.height(), m.width()});
  std::copy(m.bits().begin(), m.bits().end(), out.mutable_data());
  return out;
}

// [H, W] or [C, H, W]
GrayImage to_image(const ImageArray& a) {
  if (a.ndim() == 2) {
    const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1));
    return GrayImage(h, w, 1, std::vector<float>(a.data(), a.data() + h * w));
  }
  if (a.ndim() == 3) {
    const auto c = static_cast<std::size_t>(a.shape(0)), h = static_cast<std::size_t>(a.shape(1)),
               w = static_cast<std::size_t>(a.shape(2));
    return GrayImage(h, w, c, std::vector<float>(a.data(), a.data() + c * h * w));
  }
  throw ShapeError("image: expected a 2-D or 3-D array");
}

ImageArray from_image(const GrayImage& img) {
  ImageArray out = img.channels() == 1 ? ImageArray({img.height(), img.width()})
                                       : ImageArray({img.channels(), img.height(), img.width()});
  std::copy(img.values().begin(), img.values().end(), out.mutable_data());
  return out;
}

py::object to_py(const nlohmann::ordered_json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::ordered_json from_py(const py::object& o) {
  return nlohmann::ordered_json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

lqe::PredictionEnsemble ensemble(const MaskArray& a, const MaskArray& b, const MaskArray& c) {
  lqe::PredictionEnsemble e;
  e.predictions = {to_mask(a), to_mask(b), to_mask(c)};
  return e;
}

lqe::LqeConfig lqe_config(const py::object& overrides) {
  nlohmann::ordered_json tree = nlohmann::ordered_json::object();
  if (!overrides.is_none()) tree["lqe"] = from_py(overrides);
  return config::apply(tree).pipeline.lqe;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Label enhancement and annotation core";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", error.ptr());
  py::register_exception<FormatError>(m, "FormatError", error.ptr());
  py::register_exception<NumericError>(m, "NumericError", error.ptr());

  // metrics
  m.def("iou", [](const MaskArray& a, const MaskArray& b) { return maskio::iou(to_mask(a), to_mask(b)); });
  m.def("dice", [](const MaskArray& a, const MaskArray& b) { return maskio::dice(to_mask(a), to_mask(b)); });
  m.def("accuracy", [](const MaskArray& p, const MaskArray& g) {
    return maskio::accuracy(maskio::confusion(to_mask(p), to_mask(g)));
  });
  m.def("miou", [](const MaskArray& p, const MaskArray& g) { return maskio::miou(to_mask(p), to_mask(g)); });
  m.def("load_mask", [](const std::string& path) { return from_mask(maskio::load_mask(path)); });
  m.def("save_mask", [](const MaskArray& a, const std::string& path) { maskio::save_mask(to_mask(a), path); });
  m.def("load_image", [](const std::string& path) { return from_image(maskio::load_image(path)); });

  // label quality
  m.def("pixel_rmse", [](const MaskArray& a, const MaskArray& b, const MaskArray& c) {
    return lqe::pixel_rmse(ensemble(a, b, c));
  });
  m.def(
      "quality_score",
      [](double r, double iou_avg, double dice_avg, const py::object& cfg) {
        return lqe::quality_score(r, iou_avg, dice_avg, lqe_config(cfg));
      },
      py::arg("r_mean"), py::arg("iou_avg"), py::arg("dice_avg"), py::arg("config") = py::none());
  m.def(
      "evaluate_ensemble",
      [](const MaskArray& a, const MaskArray& b, const MaskArray& c, const py::object& cfg) {
        const auto rep = lqe::evaluate(ensemble(a, b, c), lqe_config(cfg));
        py::dict d;
        d["r_mean"] = rep.r_mean;
        d["iou_avg"] = rep.iou_avg;
        d["dice_avg"] = rep.dice_avg;
        d["q"] = rep.q;
        d["verdict"] = lqe::to_string(rep.verdict);
        return d;
      },
      py::arg("a"), py::arg("b"), py::arg("c"), py::arg("config") = py::none(),
      "Scores three aligned predictions; config overrides lqe keys such as tau_q.");

  // perturbations
  m.def(
      "ensemble_specs",
      [](std::uint64_t seed, double sigma) {
        py::list out;
        for (const auto& s : perturb::make_ensemble_specs(seed, sigma)) out.append(to_py(perturb::to_json(s)));
        return out;
      },
      py::arg("seed"), py::arg("sigma") = perturb::kDefaultNoiseSigma);
  m.def("apply_mask", [](const MaskArray& a, const py::object& spec) {
    return from_mask(perturb::apply_mask(to_mask(a), perturb::spec_from_json(from_py(spec))));
  });
  m.def("apply_image", [](const ImageArray& a, const py::object& spec) {
    return from_image(perturb::apply_image(to_image(a), perturb::spec_from_json(from_py(spec))));
  });
  m.def("align_prediction", [](const MaskArray& a, const py::object& spec) {
    return from_mask(perturb::align_prediction(to_mask(a), perturb::spec_from_json(from_py(spec))));
  });

  // synthetic data
  m.def(
      "gen_scene",
      [](std::uint64_t seed, std::size_t size) {
        synth::SceneSpec s;
        s.seed = seed;
        s.size = size;
        auto sc = synth::gen_scene(s);
        return py::make_tuple(from_image(sc.image), from_mask(sc.gt));
      },
      py::arg("seed"), py::arg("size") = 64, "Returns (image, exact mask).");
  m.def(
      "corrupt_label",
      [](const MaskArray& gt, std::uint64_t seed) {
        synth::CorruptionSpec c;
        c.seed = seed;
        return from_mask(synth::corrupt_label(to_mask(gt), c));
      },
      py::arg("gt"), py::arg("seed"));
  m.def(
      "gen_dataset",
      [](std::size_t n, std::uint64_t seed, const std::string& out_dir, std::size_t size, double test_fraction) {
        synth::SceneSpec s;
        s.seed = seed;
        s.size = size;
        synth::CorruptionSpec c;
        c.seed = seed;
        synth::gen_dataset(n, s, c, out_dir, test_fraction);
        return (std::filesystem::path(out_dir) / "manifest.jsonl").string();
      },
      py::arg("n"), py::arg("seed"), py::arg("out_dir"), py::arg("size") = 64, py::arg("test_fraction") = 0.2,
      "Writes a synthetic dataset and returns the manifest path.");

  // configuration and pipeline
  m.def(
      "load_config",
      [](const std::optional<std::string>& path, const std::vector<std::string>& overrides) {
        std::optional<std::filesystem::path> p;
        if (path) p = *path;
        return to_py(config::load_config(p, overrides).to_json());
      },
      py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "run_pipeline",
      [](const std::string& manifest, const std::optional<std::string>& config_path,
         const std::vector<std::string>& overrides) {
        std::optional<std::filesystem::path> p;
        if (config_path) p = *config_path;
        const auto cfg = config::load_config(p, overrides);
        pipeline::PipelineResult res;
        {
          py::gil_scoped_release release;
          res = pipeline::run(cfg.pipeline, maskio::read_manifest(manifest));
        }
        auto stats = nlohmann::ordered_json::array();
        for (const auto& s : res.stats) stats.push_back(s.to_json());
        return to_py(stats);
      },
      py::arg("manifest"), py::arg("config") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Runs the full pipeline; returns the per-iteration statistics.");
}
