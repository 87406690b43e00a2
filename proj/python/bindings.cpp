#include <iostream>
#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cte/cli.hpp"
#include "cte/error.hpp"
#include "cte/evaluation.hpp"
#include "cte/features.hpp"
#include "cte/synthcorpus.hpp"
#include "cte/trainer.hpp"

namespace py = pybind11;
using namespace cte;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

features::FeatureSequence to_features(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("features must be a 2-d array (frames x bins)");
  features::FeatureSequence f(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), f.values.begin());
  return f;
}

Array from_features(const features::FeatureSequence& f) {
  Array out({f.num_frames, f.num_bins});
  std::copy(f.values.begin(), f.values.end(), out.mutable_data());
  return out;
}

std::vector<eval::Embedding> to_embeddings(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("embeddings must be a 2-d array (n x dim)");
  std::vector<eval::Embedding> out(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].assign(a.data() + i * a.shape(1), a.data() + (i + 1) * a.shape(1));
  }
  return out;
}

Array from_rows(const std::vector<std::vector<double>>& rows, std::size_t cols) {
  Array out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), out.mutable_data() + i * cols);
  return out;
}

num::Precision precision_of(int bits) {
  if (bits == 64) return num::Precision::f64;
  if (bits == 32) return num::Precision::f32;
  throw py::value_error("precision must be 64 or 32");
}

py::dict to_dict(const std::map<std::string, std::string>& m) {
  py::dict d;
  for (const auto& [k, v] : m) d[py::str(k)] = v;
  return d;
}

/// A trained (or freshly initialised) student/teacher pair.
struct Model {
  train::TrainState state;

  py::array embed(const std::vector<Array>& segments, int precision, std::size_t batch_size) {
    std::vector<features::FeatureSequence> feats;
    for (const auto& s : segments) feats.push_back(to_features(s));
    const auto vecs = eval::extract_embeddings(state.model.student, feats, precision_of(precision), batch_size);
    return from_rows(vecs, state.model.student.config.model_dim);
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Acoustic word embeddings with a correspondence transformer encoder";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("log_mel", [](const std::vector<double>& samples, int sample_rate) {
    features::FrontendConfig c;
    c.sample_rate = sample_rate;
    return from_features(features::compute_log_mel({samples, sample_rate}, c));
  }, py::arg("samples"), py::arg("sample_rate") = 16000, "T x 80 log-mel features of a waveform in [-1, 1].");

  m.def("read_wav", [](const std::filesystem::path& path) {
    auto w = features::read_wav(path);
    return py::make_tuple(py::array_t<double>(w.samples.size(), w.samples.data()), w.sample_rate);
  }, py::arg("path"));

  m.def("read_features", [](const std::filesystem::path& path) { return from_features(features::read_feature_file(path)); },
        py::arg("path"), "Reads a .ctef feature file.");

  m.def("generate_corpus", [](const std::filesystem::path& out_dir, const std::map<std::string, std::string>& spec_keys) {
    synth::CorpusSpec spec;
    for (const auto& [k, v] : spec_keys) spec.set(k, v);
    const auto corpus = synth::generate(spec);
    synth::write_corpus(corpus, out_dir);
    return corpus.segments.size();
  }, py::arg("out_dir"), py::arg("spec") = std::map<std::string, std::string>{},
        "Writes a synthetic corpus; returns the number of word segments.");

  m.def("corpus_spec_defaults", [] { return to_dict(synth::CorpusSpec{}.entries()); });
  m.def("train_config_defaults", [] { return to_dict(train::TrainConfig{}.entries()); });

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::map<std::string, std::string>& config, std::uint64_t seed) {
             train::TrainConfig tc;
             for (const auto& [k, v] : config) tc.set(k, v);
             tc.validate();
             return Model{train::init_state(tc.model, seed)};
           }),
           py::arg("config") = std::map<std::string, std::string>{}, py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& path) { return Model{train::load_checkpoint(path)}; },
                  py::arg("path"))
      .def("save", [](const Model& self, const std::filesystem::path& path) { train::save_checkpoint(path, self.state); },
           py::arg("path"))
      .def_property_readonly("step", [](const Model& self) { return self.state.step; })
      .def_property_readonly("embedding_dim", [](const Model& self) { return self.state.model.student.config.model_dim; })
      .def_property_readonly("parameter_count", [](const Model& self) { return self.state.model.student.parameter_count(); })
      .def("embed", &Model::embed, py::arg("segments"), py::arg("precision") = 64, py::arg("batch_size") = 32,
           "Embeds a list of T x F feature arrays; returns an n x D array.");

  m.def("same_different", [](const Array& embeddings, const std::vector<std::string>& labels) {
    const auto r = eval::same_different(to_embeddings(embeddings), labels);
    py::dict d;
    d["ap_roc"] = r.ap_roc;
    d["ap_pr"] = r.ap_pr;
    d["n_same"] = r.n_same;
    d["n_diff"] = r.n_diff;
    return d;
  }, py::arg("embeddings"), py::arg("labels"));

  m.def("roc_auc", [](const std::vector<double>& scores, const std::vector<bool>& same) {
    std::vector<std::uint8_t> s(same.begin(), same.end());
    return eval::roc_auc(scores, s);
  }, py::arg("scores"), py::arg("same"));
  m.def("pr_ap", [](const std::vector<double>& scores, const std::vector<bool>& same) {
    std::vector<std::uint8_t> s(same.begin(), same.end());
    return eval::pr_ap(scores, s);
  }, py::arg("scores"), py::arg("same"));

  m.def("psed", [](const std::vector<std::string>& a, const std::vector<std::string>& b) { return eval::psed(a, b); },
        py::arg("a"), py::arg("b"), "Phone sequence edit distance.");
  m.def("downsampling_baseline", [](const Array& f, std::size_t n) {
    const auto v = eval::downsampling_baseline(to_features(f), n);
    return py::array_t<double>(v.size(), v.data());
  }, py::arg("features"), py::arg("n") = 10);
  m.def("dtw_distance", [](const Array& a, const Array& b) { return eval::dtw_distance(to_features(a), to_features(b)); },
        py::arg("a"), py::arg("b"));
  m.def("collapse_metric", [](const Array& e) { return eval::collapse_metric(to_embeddings(e)); }, py::arg("embeddings"));
  m.def("pca_project", [](const Array& e, std::size_t k) {
    const auto r = eval::pca_project(to_embeddings(e), k);
    return py::make_tuple(from_rows(r.coordinates, r.components.size()), r.explained);
  }, py::arg("embeddings"), py::arg("components") = 2, "Returns (coordinates, explained variance fractions).");

  m.def("check_loss_gradients", [](const std::map<std::string, std::string>& config, std::uint64_t seed,
                                   std::size_t max_frames, double tolerance) {
    train::TrainConfig tc;
    for (const auto& [k, v] : config) tc.set(k, v);
    num::GradCheckOptions o;
    o.tolerance = tolerance;
    const auto r = train::check_loss_gradients(tc.model, seed, max_frames, 3, o);
    return py::make_tuple(r.pass, r.max_rel_error);
  }, py::arg("config"), py::arg("seed") = 0, py::arg("max_frames") = 12, py::arg("tolerance") = 1e-4,
        "Finite-difference check of the loss gradients; returns (passed, max relative error).");

  m.def("run", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs a command-line command; returns (exit code, stdout, stderr).");
}
