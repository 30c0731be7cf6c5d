#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "glimpse/config.hpp"
#include "glimpse/dataset.hpp"
#include "glimpse/model.hpp"
#include "glimpse/report.hpp"
#include "glimpse/train.hpp"

namespace py = pybind11;
using namespace glimpse;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image image_from_array(const DoubleArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("image array must be 2-D");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::memcpy(img.data.data(), a.data(), sizeof(double) * img.data.size());
  return img;
}

py::array_t<double> array_from_image(const Image& img) {
  py::array_t<double> a({img.height, img.width});
  std::memcpy(a.mutable_data(), img.data.data(), sizeof(double) * img.data.size());
  return a;
}

LabeledSet set_from_arrays(const DoubleArray& images, const std::vector<int>& labels) {
  if (images.ndim() != 3) throw std::invalid_argument("images array must be (n, h, w)");
  const auto n = static_cast<std::size_t>(images.shape(0));
  if (labels.size() != n) throw std::invalid_argument("labels length must match images");
  LabeledSet set;
  const int h = static_cast<int>(images.shape(1));
  const int w = static_cast<int>(images.shape(2));
  const double* src = images.data();
  for (std::size_t i = 0; i < n; ++i) {
    Image img(w, h);
    std::memcpy(img.data.data(), src + i * img.data.size(),
                sizeof(double) * img.data.size());
    set.images.push_back(std::move(img));
  }
  set.labels = labels;
  return set;
}

TrainCallbacks wrap_progress(const py::object& progress) {
  TrainCallbacks cb;
  if (!progress.is_none()) {
    cb.on_epoch = [progress](const std::string& phase, int epoch, double loss,
                             double heldout) {
      py::gil_scoped_acquire gil;
      progress(phase, epoch, loss, heldout);
    };
  }
  return cb;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "sequential-glimpse image classifier core";

  py::class_<NormLoc>(m, "NormLoc")
      .def(py::init<>())
      .def(py::init([](double x, double y) { return NormLoc{x, y}; }), py::arg("x"),
           py::arg("y"))
      .def_readwrite("x", &NormLoc::x)
      .def_readwrite("y", &NormLoc::y)
      .def("__repr__", [](const NormLoc& l) {
        return "NormLoc(x=" + std::to_string(l.x) + ", y=" + std::to_string(l.y) + ")";
      });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("full_side", &ModelConfig::full_side)
      .def_readwrite("low_side", &ModelConfig::low_side)
      .def_readwrite("patch_side", &ModelConfig::patch_side)
      .def_readwrite("scales", &ModelConfig::scales)
      .def_readwrite("classes", &ModelConfig::classes)
      .def_readwrite("hidden", &ModelConfig::hidden)
      .def_readwrite("num_glimpses", &ModelConfig::num_glimpses)
      .def_readwrite("weight_sharing", &ModelConfig::weight_sharing)
      .def("validate", &ModelConfig::validate);

  py::class_<TrainHyper>(m, "TrainHyper")
      .def(py::init<>())
      .def_readwrite("lambda_", &TrainHyper::lambda)
      .def_readwrite("gamma", &TrainHyper::gamma)
      .def_readwrite("sigma_sq", &TrainHyper::sigma_sq)
      .def_readwrite("lr", &TrainHyper::lr)
      .def_readwrite("momentum", &TrainHyper::momentum)
      .def_readwrite("batch", &TrainHyper::batch)
      .def_readwrite("epochs", &TrainHyper::epochs)
      .def_readwrite("grid_side", &TrainHyper::grid_side)
      .def_readwrite("grid_step", &TrainHyper::grid_step)
      .def_readwrite("fine_tune_epochs", &TrainHyper::fine_tune_epochs)
      .def_readwrite("diversity_enabled", &TrainHyper::diversity_enabled)
      .def_readwrite("contrastive_enabled", &TrainHyper::contrastive_enabled)
      .def_readwrite("fine_tune_enabled", &TrainHyper::fine_tune_enabled)
      .def_readwrite("shuffle_seed", &TrainHyper::shuffle_seed)
      .def_readwrite("workers", &TrainHyper::workers);

  py::class_<JitterSpec>(m, "JitterSpec")
      .def(py::init<>())
      .def_readwrite("canvas", &JitterSpec::canvas)
      .def_readwrite("copies_per_image", &JitterSpec::copies_per_image)
      .def_readwrite("seed", &JitterSpec::seed);

  py::class_<LabeledSet>(m, "LabeledSet")
      .def(py::init(&set_from_arrays), py::arg("images"), py::arg("labels"))
      .def("__len__", [](const LabeledSet& s) { return s.size(); })
      .def("image", [](const LabeledSet& s, std::size_t i) {
        if (i >= s.size()) throw std::out_of_range("image index");
        return array_from_image(s.images[i]);
      })
      .def("label", [](const LabeledSet& s, std::size_t i) {
        if (i >= s.size()) throw std::out_of_range("label index");
        return s.labels[i];
      })
      .def_property_readonly("width", &LabeledSet::width)
      .def_property_readonly("height", &LabeledSet::height);

  m.def("read_idx", &read_idx, py::arg("images_path"), py::arg("labels_path"));
  m.def("write_idx", &write_idx, py::arg("set"), py::arg("images_path"),
        py::arg("labels_path"));
  m.def("make_jittered", &make_jittered, py::arg("src"), py::arg("spec"));

  py::class_<GlimpseTrace>(m, "GlimpseTrace")
      .def_property_readonly("locations",
                             [](const GlimpseTrace& t) { return t.locations; })
      .def_property_readonly("stage_logits",
                             [](const GlimpseTrace& t) { return t.stage_logits; })
      .def_property_readonly("low_logits",
                             [](const GlimpseTrace& t) { return t.low_logits; })
      .def_property_readonly("aggregates",
                             [](const GlimpseTrace& t) { return t.aggregates; })
      .def_readonly("flops", &GlimpseTrace::flops)
      .def_readonly("decided_at", &GlimpseTrace::decided_at)
      .def("final_distribution", &GlimpseTrace::final_distribution)
      .def("predicted_label", &GlimpseTrace::predicted_label);

  py::class_<GlimpseModel>(m, "GlimpseModel")
      .def_static("create", &GlimpseModel::create, py::arg("config"), py::arg("seed"))
      .def_static("load", &GlimpseModel::load, py::arg("path"))
      .def("save", &GlimpseModel::save, py::arg("path"))
      .def("clone", &GlimpseModel::clone)
      .def_readonly("config", &GlimpseModel::config)
      .def("run",
           [](const GlimpseModel& model, const DoubleArray& img, int max_glimpses) {
             return run(model, image_from_array(img), max_glimpses);
           },
           py::arg("image"), py::arg("max_glimpses"))
      .def("run_cascaded",
           [](const GlimpseModel& model, const DoubleArray& img, double threshold,
              bool force_final) {
             const CascadeDecision d =
                 run_cascaded(model, image_from_array(img), threshold, force_final);
             return py::make_tuple(d.label, d.trace);
           },
           py::arg("image"), py::arg("threshold"), py::arg("force_final") = false);

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("error_rate", &EvalReport::error_rate)
      .def_readonly("rejection_rate", &EvalReport::rejection_rate)
      .def_readonly("per_stage_classified", &EvalReport::per_stage_classified)
      .def_readonly("per_stage_error", &EvalReport::per_stage_error)
      .def_readonly("mean_flops", &EvalReport::mean_flops)
      .def_readonly("speedup", &EvalReport::speedup)
      .def("__repr__", &format_report_kv);

  m.def("evaluate", &evaluate, py::arg("model"), py::arg("set"), py::arg("glimpses"),
        py::arg("baseline_side") = 0, py::arg("workers") = 0,
        py::call_guard<py::gil_scoped_release>());
  m.def("evaluate_cascade", &evaluate_cascade, py::arg("model"), py::arg("set"),
        py::arg("threshold"), py::arg("force_final") = false,
        py::arg("baseline_side") = 0, py::arg("workers") = 0,
        py::call_guard<py::gil_scoped_release>());
  m.def("baseline_fc_flops", &baseline_fc_flops, py::arg("side"), py::arg("hidden"),
        py::arg("classes"));
  m.def("mac_count", &mac_count, py::arg("in_dim"), py::arg("hidden_dim"),
        py::arg("out_dim"));
  m.def("run_flops", &run_flops, py::arg("config"), py::arg("glimpses"));

  m.def("softmax", [](const Vec& o) { return softmax(o); }, py::arg("logits"));
  m.def("cross_entropy",
        [](const Vec& o, int label) { return cross_entropy(o, label); },
        py::arg("logits"), py::arg("label"));

  m.def("train_full",
        [](GlimpseModel& model, const LabeledSet& train, const TrainHyper& hyper,
           const py::object& progress, const LabeledSet* heldout) {
          const TrainCallbacks cb = wrap_progress(progress);
          py::gil_scoped_release release;
          train_full(model, train, hyper, cb, heldout);
        },
        py::arg("model"), py::arg("train"), py::arg("hyper"),
        py::arg("progress") = py::none(), py::arg("heldout") = nullptr);
  m.def("train_stage",
        [](GlimpseModel& model, int k, const LabeledSet& train,
           const TrainHyper& hyper, const py::object& progress,
           const LabeledSet* heldout) {
          const TrainCallbacks cb = wrap_progress(progress);
          py::gil_scoped_release release;
          train_stage(model, k, train, hyper, cb, heldout);
        },
        py::arg("model"), py::arg("stage"), py::arg("train"), py::arg("hyper"),
        py::arg("progress") = py::none(), py::arg("heldout") = nullptr);
  m.def("fine_tune",
        [](GlimpseModel& model, int k, const LabeledSet& train,
           const TrainHyper& hyper, const py::object& progress,
           const LabeledSet* heldout) {
          const TrainCallbacks cb = wrap_progress(progress);
          py::gil_scoped_release release;
          fine_tune(model, k, train, hyper, cb, heldout);
        },
        py::arg("model"), py::arg("stage"), py::arg("train"), py::arg("hyper"),
        py::arg("progress") = py::none(), py::arg("heldout") = nullptr);

  py::class_<EStepResult>(m, "EStepResult")
      .def_readonly("z_star", &EStepResult::z_star)
      .def_readonly("z_minus", &EStepResult::z_minus)
      .def_readonly("best_loss", &EStepResult::best_loss)
      .def_readonly("offending_class", &EStepResult::offending_class);

  m.def("e_step",
        [](const GlimpseModel& model, int k, const DoubleArray& img, int label,
           const TrainHyper& hyper) {
          return e_step(model, k, image_from_array(img), label, hyper);
        },
        py::arg("model"), py::arg("stage"), py::arg("image"), py::arg("label"),
        py::arg("hyper"));
  m.def("candidate_grid", &candidate_grid, py::arg("loc"), py::arg("side_px"),
        py::arg("grid_side"), py::arg("grid_step"));
  m.def("diversity_penalty",
        [](NormLoc z, const std::vector<NormLoc>& previous, double gamma,
           double sigma_sq) {
          return diversity_penalty(z, previous, gamma, sigma_sq);
        },
        py::arg("z"), py::arg("previous"), py::arg("gamma"), py::arg("sigma_sq"));

  m.def("dump_filters",
        [](const GlimpseModel& model, int stage, int tile_rows, int tile_cols,
           const std::string& out_path) {
          if (stage == 0)
            dump_filters(model.n0, tile_rows, tile_cols, out_path);
          else
            dump_filters(*model.stages.at(stage - 1).net, tile_rows, tile_cols,
                         out_path);
        },
        py::arg("model"), py::arg("stage"), py::arg("tile_rows"),
        py::arg("tile_cols"), py::arg("out_path"));
  m.def("dump_traces", &dump_traces, py::arg("model"), py::arg("set"),
        py::arg("n_examples"), py::arg("out_path"));

  py::register_exception<std::invalid_argument>(m, "ContractError",
                                                PyExc_ValueError);
}
