#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "capslab/analysis.hpp"
#include "capslab/capsnet.hpp"
#include "capslab/checkpoint.hpp"
#include "capslab/config.hpp"
#include "capslab/dataset.hpp"
#include "capslab/errors.hpp"
#include "capslab/filters.hpp"
#include "capslab/ops.hpp"
#include "capslab/pca.hpp"
#include "capslab/train.hpp"
#include "capslab/transforms.hpp"

namespace py = pybind11;
using namespace capslab;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const FloatArray& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] =
      static_cast<int>(a.shape(i));
  std::vector<float> data(a.data(), a.data() + a.size());
  return Tensor::from_vector(std::move(shape), std::move(data));
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Images arrive as [N,1,H,W], [N,H,W], or a single [H,W].
Tensor batch_from_array(const FloatArray& a) {
  Tensor t = tensor_from_array(a);
  if (t.ndim() == 2) return ops::reshape(t, {1, 1, t.dim(0), t.dim(1)});
  if (t.ndim() == 3) return ops::reshape(t, {t.dim(0), 1, t.dim(1), t.dim(2)});
  if (t.ndim() == 4) return t;
  throw ShapeError("images must have 2-4 axes, got " + shape_str(t.shape()));
}

py::dict report_dict(const TrainReport& r) {
  py::list epochs;
  for (const EpochStats& e : r.epochs) {
    epochs.append(py::dict(py::arg("epoch") = e.epoch, py::arg("margin") = e.margin,
                           py::arg("recon") = e.recon, py::arg("total") = e.total,
                           py::arg("test_error") = e.test_error));
  }
  return py::dict(py::arg("config_id") = r.config_id, py::arg("seed") = r.seed,
                  py::arg("epochs") = epochs, py::arg("final_test_error") = r.final_test_error,
                  py::arg("checkpoints") = r.checkpoint_files);
}

// A trained capsule network plus its layout, the unit the python side works in.
struct Model {
  NetworkConfig cfg;
  CapsNetParams params;

  CapsNetOutput forward(const FloatArray& images) const {
    return capsnet_forward(batch_from_array(images), params, cfg);
  }
};

TrainOptions options(int epochs, int batch, float lr, uint64_t seed, const std::string& dir,
                     bool log) {
  TrainOptions opt;
  opt.epochs = epochs;
  opt.batch_size = batch;
  opt.lr = lr;
  opt.seed = seed;
  opt.checkpoint_dir = dir;
  opt.log = log;
  return opt;
}

}  // namespace

PYBIND11_MODULE(_capslab, m) {
  m.doc() = "capsule network training and capsule-space analysis";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<NetworkConfig>(m, "Config")
      .def_static("tiny", &NetworkConfig::tiny)
      .def_static("full", &NetworkConfig::full)
      .def_static("micro", &NetworkConfig::micro)
      .def_readwrite("routing_enabled", &NetworkConfig::routing_enabled)
      .def_readwrite("routing_iterations", &NetworkConfig::routing_iterations)
      .def_readonly("input_h", &NetworkConfig::input_h)
      .def_readonly("input_w", &NetworkConfig::input_w)
      .def_readonly("num_classes", &NetworkConfig::num_classes)
      .def_readonly("class_dim", &NetworkConfig::class_dim)
      .def_property(
          "recon",
          [](const NetworkConfig& c) { return to_string(c.recon_mode); },
          [](NetworkConfig& c, const std::string& s) { c.recon_mode = recon_mode_from_string(s); })
      .def("id", &NetworkConfig::id)
      .def("validate", &NetworkConfig::validate)
      .def("__repr__", [](const NetworkConfig& c) { return "<Config " + c.id() + ">"; });

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("images", [](const Dataset& d) { return array_from_tensor(d.images); })
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("split", &Dataset::split)
      .def_property_readonly("count", &Dataset::count)
      .def("take", &take, py::arg("n"))
      .def("per_class", &subset_per_class, py::arg("per_class"))
      .def("__len__", &Dataset::count)
      .def("__repr__", [](const Dataset& d) {
        return "<Dataset " + d.split + " n=" + std::to_string(d.count()) + ">";
      });

  m.def("load_dataset", &load_idx, py::arg("images_path"), py::arg("labels_path"),
        py::arg("split") = "");
  m.def("save_dataset", &save_idx, py::arg("images_path"), py::arg("labels_path"),
        py::arg("dataset"));

  py::class_<Model>(m, "CapsNet")
      .def_property_readonly("config", [](const Model& mdl) { return mdl.cfg; })
      .def_property_readonly("param_count", [](const Model& mdl) { return mdl.params.count(); })
      .def_static(
          "train",
          [](const NetworkConfig& cfg, const Dataset& train, const Dataset& test, int epochs,
             int batch, float lr, uint64_t seed, const std::string& checkpoint_dir, bool log) {
            CapsTrainResult r = train_capsnet(cfg, train, test,
                                              options(epochs, batch, lr, seed, checkpoint_dir, log));
            return py::make_tuple(Model{cfg, r.params}, report_dict(r.report));
          },
          py::arg("config"), py::arg("train"), py::arg("test"), py::arg("epochs") = 5,
          py::arg("batch") = 32, py::arg("lr") = 1e-3f, py::arg("seed") = 0,
          py::arg("checkpoint_dir") = "", py::arg("log") = false)
      .def_static(
          "load",
          [](const std::string& path) {
            Checkpoint ck = load_checkpoint(path);
            if (ck.model != "capsnet") {
              throw UsageError("'" + path + "' holds a " + ck.model + ", not a capsule network");
            }
            return Model{ck.caps_config, capsnet_from_checkpoint(ck)};
          },
          py::arg("path"))
      .def(
          "save",
          [](const Model& mdl, const std::string& path, int epochs, uint64_t seed) {
            save_checkpoint(path, make_checkpoint(mdl.cfg, mdl.params, epochs, seed));
          },
          py::arg("path"), py::arg("epochs") = 0, py::arg("seed") = 0)
      .def("capsules",
           [](const Model& mdl, const FloatArray& images) {
             return array_from_tensor(mdl.forward(images).v.detach());
           })
      .def("probs",
           [](const Model& mdl, const FloatArray& images) {
             return array_from_tensor(mdl.forward(images).probs.detach());
           })
      .def("predict",
           [](const Model& mdl, const FloatArray& images) {
             return ops::argmax_rows(mdl.forward(images).probs.detach());
           })
      .def(
          "evaluate",
          [](const Model& mdl, const Dataset& data) {
            Evaluation ev = evaluate_capsnet(mdl.params, mdl.cfg, data);
            return py::dict(py::arg("error_rate") = ev.error_rate,
                            py::arg("classes") = ev.classes,
                            py::arg("confusion") = ev.confusion);
          },
          py::arg("dataset"))
      .def(
          "maximize",
          [](const Model& mdl, int class_j, int steps, int trials, uint64_t seed,
             float step_size) {
            AmConfig am;
            am.steps = steps;
            am.trials = trials;
            am.seed = seed;
            am.step_size = step_size;
            std::vector<AmTrial> out = activation_maximize(mdl.params, mdl.cfg, class_j, am);
            py::list images, activations;
            for (const AmTrial& t : out) {
              images.append(array_from_tensor(t.image));
              activations.append(t.activation);
            }
            return py::dict(py::arg("images") = images, py::arg("activations") = activations);
          },
          py::arg("class_j"), py::arg("steps") = 1000, py::arg("trials") = 100,
          py::arg("seed") = 0, py::arg("step_size") = 0.1f)
      .def(
          "match",
          [](const Model& mdl, int class_j, const std::vector<float>& target, int steps,
             uint64_t seed, float step_size, float init_lo, float init_hi, int filter_period) {
            AmConfig am;
            am.steps = steps;
            am.seed = seed;
            am.step_size = step_size;
            am.init_lo = init_lo;
            am.init_hi = init_hi;
            am.filter_period = filter_period;
            MatchResult r = activation_match(mdl.params, mdl.cfg, class_j, target, am);
            return py::dict(py::arg("image") = array_from_tensor(r.image),
                            py::arg("initial_loss") = r.initial_loss,
                            py::arg("final_loss") = r.final_loss,
                            py::arg("reduction_ratio") = r.reduction_ratio,
                            py::arg("predicted_class") = r.predicted_class);
          },
          py::arg("class_j"), py::arg("target"), py::arg("steps") = 1000, py::arg("seed") = 0,
          py::arg("step_size") = 0.1f, py::arg("init_lo") = 0.4f, py::arg("init_hi") = 0.6f,
          py::arg("filter_period") = 100)
      .def(
          "compaction",
          [](const Model& mdl, const Dataset& data, int class_j) {
            const CompactionCurve c =
                class_j < 0 ? energy_compaction_curve_all(mdl.params, mdl.cfg, data)
                            : energy_compaction_curve(mdl.params, mdl.cfg, data, class_j);
            return py::dict(py::arg("variance") = c.variance,
                            py::arg("cumulative") = c.cumulative, py::arg("scope") = c.scope);
          },
          py::arg("dataset"), py::arg("class_j") = -1);

  m.def(
      "squash",
      [](const FloatArray& a) { return array_from_tensor(ops::squash(tensor_from_array(a))); },
      py::arg("s"), "Vector nonlinearity over the last axis: |s|/(1+|s|^2) * s.");
  m.def(
      "route",
      [](const FloatArray& u_hat, int iterations, bool enabled) {
        RoutingState st = route(tensor_from_array(u_hat), iterations, enabled);
        py::list couplings;
        for (const Tensor& c : st.couplings) couplings.append(array_from_tensor(c));
        return py::dict(py::arg("v") = array_from_tensor(st.v.detach()),
                        py::arg("s") = array_from_tensor(st.s.detach()),
                        py::arg("couplings") = couplings);
      },
      py::arg("u_hat"), py::arg("iterations") = 3, py::arg("enabled") = true,
      "Routing by agreement over predictions [N,P,J,D].");
  m.def(
      "median_filter3x3",
      [](const FloatArray& a) {
        return array_from_tensor(median_filter3x3(tensor_from_array(a)));
      },
      py::arg("image"));
  m.def(
      "apply_transform",
      [](const FloatArray& image, const std::string& kind, float intensity) {
        const TransformSpec spec = TransformSpec::standard(transform_kind_from_string(kind));
        Tensor img = tensor_from_array(image);
        if (img.ndim() == 2) img = ops::reshape(img, {1, img.dim(0), img.dim(1)});
        return array_from_tensor(apply_transform(img, spec, intensity));
      },
      py::arg("image"), py::arg("kind"), py::arg("intensity"),
      "Applies rotation|scale|shift_y|morphology at a standard-grid intensity.");
  m.def(
      "fit_pca",
      [](const std::vector<std::vector<double>>& points) {
        const PcaModel pm = fit_pca_points(points);
        return py::dict(py::arg("mean") = pm.mean, py::arg("components") = pm.components,
                        py::arg("variances") = pm.variances, py::arg("dim") = pm.dim);
      },
      py::arg("points"), "PCA of row vectors; components are rows, variances descend.");

  m.attr("__version__") = "0.1.0";
}
