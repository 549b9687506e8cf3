// Python surface over the fbprop core. Tensors cross the boundary as numpy
// arrays (float64, C order); everything heavier stays in C++.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fbprop/dataset.hpp"
#include "fbprop/error.hpp"
#include "fbprop/experiment.hpp"
#include "fbprop/feedback.hpp"
#include "fbprop/loss.hpp"
#include "fbprop/metrics.hpp"
#include "fbprop/model.hpp"
#include "fbprop/train.hpp"

namespace py = pybind11;
using namespace fbprop;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<std::size_t> shape(static_cast<std::size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i)
        shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(a.shape(i));
    Tensor t = Tensor::zeros(shape);
    std::copy(a.data(), a.data() + a.size(), t.data().begin());
    return t;
}

py::array_t<double> from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> a(shape);
    std::copy(t.data().begin(), t.data().end(), a.mutable_data());
    return a;
}

FeedbackConfig make_config(const std::vector<std::string>& pivots, double rate,
                           std::size_t iters, const std::string& rule,
                           const std::string& placement, bool weighted,
                           double clip) {
    FeedbackConfig c;
    c.pivots = pivots;
    c.rate = rate;
    c.iterations = iters;
    c.rule = update_rule_from_name(rule);
    if (placement == "post")
        c.placement = ResidualPlacement::PostNonlinearity;
    else if (placement == "pre")
        c.placement = ResidualPlacement::PreNonlinearity;
    else
        throw ConfigError("placement must be 'post' or 'pre'");
    c.weighted_loss = weighted;
    c.clip_norm = clip;
    return c;
}

EvidencePartition make_evidence(const std::map<std::size_t, double>& known,
                                std::size_t output_dim) {
    EvidencePartition ev;
    ev.known = known;
    for (std::size_t j = 0; j < output_dim; ++j)
        if (!ev.known.count(j))
            ev.unknown.push_back(j);
    ev.validate(output_dim);
    return ev;
}

py::dict result_dict(const FeedbackResult& r,
                     const std::vector<std::size_t>& unknown) {
    py::dict d;
    d["outputs"] = from_tensor(r.outputs);
    d["unknown"] = py::cast(unknown);
    d["unknown_scores"] = py::cast(r.unknown_scores);
    d["losses"] = py::cast(r.trace.losses);
    d["degenerate"] = r.trace.degenerate;
    return d;
}

Dataset dataset_from_arrays(const py::array_t<double>& images,
                            const py::array_t<double>& labels) {
    Dataset d;
    d.images = to_tensor(images);
    d.labels = to_tensor(labels);
    if (d.images.rank() != 4 || d.labels.rank() != 2 ||
        d.images.shape()[0] != d.labels.shape()[0])
        throw ShapeError("expected images [N,C,H,W] and labels [N,d]");
    d.factors = Tensor::zeros({d.images.shape()[0], std::size_t{1}});
    return d;
}

} // namespace

PYBIND11_MODULE(_fbprop, m) {
    m.doc() = "feedback-prop inference over compact CNNs";

    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p)
                std::rethrow_exception(p);
        } catch (const IoError& e) {
            PyErr_SetString(PyExc_IOError, e.what());
        } catch (const Error& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        }
    });

    py::class_<Model>(m, "Model")
        .def("predict",
             [](const Model& self, const py::array_t<double>& input) {
                 return from_tensor(self.predict(to_tensor(input)));
             },
             py::arg("input"))
        .def_property_readonly("input_shape", &Model::input_shape)
        .def_property_readonly("output_dim", &Model::output_dim)
        .def_property_readonly("layer_names",
                               [](const Model& self) {
                                   std::vector<std::string> names;
                                   for (const auto& l : self.layers())
                                       names.push_back(l.name);
                                   return names;
                               })
        .def_property_readonly("class_weights",
                               [](const Model& self) -> py::object {
                                   if (!self.class_weights())
                                       return py::none();
                                   return py::cast(*self.class_weights());
                               })
        .def("parameter_checksum", &Model::parameter_checksum)
        .def("parameter",
             [](const Model& self, const std::string& name) {
                 return from_tensor(self.parameter(name));
             },
             py::arg("name"))
        .def("save", &save_model, py::arg("path"));

    m.def("load_model", &load_model, py::arg("path"));
    m.def("load_model_arch", &load_model_arch, py::arg("path"),
          py::arg("seed") = 0, "build a fresh model from an architecture JSON");

    m.def("mix_seed", &mix_seed, py::arg("seed"), py::arg("salt"));

    m.def("synth_dataset",
          [](const std::string& spec_json) {
              Dataset d = synth_dataset(dataset_spec_from_json(spec_json));
              return py::make_tuple(from_tensor(d.images), from_tensor(d.labels),
                                    from_tensor(d.factors));
          },
          py::arg("spec_json"),
          "generate (images, labels, factors) from a dataset spec JSON string");

    m.def("train",
          [](Model& model, const py::array_t<double>& images,
             const py::array_t<double>& labels, const py::array_t<double>& val_images,
             const py::array_t<double>& val_labels, std::size_t epochs,
             std::size_t batch, double rate, std::uint64_t seed) {
              TrainConfig c{epochs, batch, rate, seed, false};
              TrainCurve curve = train(model, dataset_from_arrays(images, labels),
                                       dataset_from_arrays(val_images, val_labels), c);
              py::dict d;
              d["train_loss"] = py::cast(curve.train_loss);
              d["val_loss"] = py::cast(curve.val_loss);
              return d;
          },
          py::arg("model"), py::arg("images"), py::arg("labels"),
          py::arg("val_images"), py::arg("val_labels"), py::arg("epochs") = 5,
          py::arg("batch") = 16, py::arg("rate") = 0.05, py::arg("seed") = 0);

    m.def("feedback",
          [](const Model& model, const py::array_t<double>& input,
             const std::map<std::size_t, double>& known, const std::string& method,
             const std::vector<std::string>& pivots, double rate, std::size_t iters,
             const std::string& rule, const std::string& placement, bool weighted,
             double clip) {
              EvidencePartition ev = make_evidence(known, model.output_dim());
              FeedbackConfig c =
                  make_config(pivots, rate, iters, rule, placement, weighted, clip);
              Tensor x = to_tensor(input);
              FeedbackResult r;
              if (method == "none")
                  r = plain_forward(model, x, ev);
              else if (method == "single")
                  r = single_layer_feedback(model, x, ev,
                                            pivots.empty() ? "" : pivots.front(), c);
              else if (method == "lf")
                  r = layer_wise_feedback(model, x, ev, c);
              else if (method == "rf")
                  r = residual_feedback(model, x, ev, c);
              else
                  throw ConfigError("method must be none, single, lf, or rf");
              return result_dict(r, ev.unknown);
          },
          py::arg("model"), py::arg("input"), py::arg("known"), py::arg("method"),
          py::arg("pivots") = std::vector<std::string>{}, py::arg("rate") = 1e-3,
          py::arg("iters") = 20, py::arg("rule") = "sgd",
          py::arg("placement") = "post", py::arg("weighted") = true,
          py::arg("clip") = 0.0,
          "run feedback-prop inference; known maps label index -> 0/1 value");

    m.def("class_weights",
          [](const py::array_t<double>& labels) {
              return py::cast(class_weights(to_tensor(labels)).lambda);
          },
          py::arg("labels"));

    m.def("weighted_bce",
          [](const py::array_t<double>& scores, const std::vector<double>& targets,
             const std::vector<double>& lambda) {
              ClassWeights w{lambda};
              return weighted_bce(to_tensor(scores), targets, w);
          },
          py::arg("scores"), py::arg("targets"), py::arg("weights"));

    m.def("average_precision", &average_precision, py::arg("scores"),
          py::arg("labels"));
    m.def("mean_ap",
          [](const py::array_t<double>& scores, const py::array_t<double>& labels,
             const std::vector<std::size_t>& subset) {
              return mean_ap(to_tensor(scores), to_tensor(labels), subset);
          },
          py::arg("scores"), py::arg("labels"), py::arg("subset"));
    m.def("multiclass_accuracy",
          [](const py::array_t<double>& scores,
             const std::vector<std::size_t>& truth) {
              return multiclass_accuracy(to_tensor(scores), truth);
          },
          py::arg("scores"), py::arg("true_classes"));

    m.def("read_tensor",
          [](const std::string& path) { return from_tensor(read_tensor(path)); },
          py::arg("path"));
    m.def("write_tensor",
          [](const py::array_t<double>& a, const std::string& path) {
              write_tensor(to_tensor(a), path);
          },
          py::arg("array"), py::arg("path"));
}
