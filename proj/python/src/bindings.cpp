// Copyright 2026 The BPLF Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Python bindings. Arrays cross the boundary as float32 numpy arrays in
// [N,C,H,W] or [C,H,W] layout; pixel arrays hold values in 0..255.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "bplf/checkpoint.hpp"
#include "bplf/data.hpp"
#include "bplf/runtime.hpp"
#include "bplf/training.hpp"
#include "bplf/verify.hpp"

namespace py = pybind11;
using namespace bplf;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<Tensor<float>> split_items(const FloatArray& batch) {
  if (batch.ndim() != 4) fail(ErrorKind::kShapeMismatch, "expected an [N,C,H,W] array");
  const Tensor<float> all = to_tensor(batch);
  const std::size_t n = all.shape()[0];
  const Shape item{all.shape()[1], all.shape()[2], all.shape()[3]};
  const std::size_t per = item[0] * item[1] * item[2];
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < n; ++i)
    out.emplace_back(item, std::vector<float>(all.data().begin() + i * per, all.data().begin() + (i + 1) * per));
  return out;
}

Condition make_condition(const FlowModel<float>& model, const std::optional<std::vector<std::size_t>>& labels) {
  if (!labels) return {};
  return Condition{*labels, model.config().num_classes};
}

ImageSet make_set(const FloatArray& pixels, const std::optional<std::vector<std::size_t>>& labels) {
  ImageSet set;
  set.images = split_items(pixels);
  if (labels) set.labels = *labels;
  return set;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bijective flow models with sigmoid-bounded couplings";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      switch (e.kind()) {
        case ErrorKind::kShapeMismatch:
        case ErrorKind::kInvalidArgument:
        case ErrorKind::kLabel:
        case ErrorKind::kFormat:
          PyErr_SetString(PyExc_ValueError, e.what());
          break;
        case ErrorKind::kIo:
          PyErr_SetString(PyExc_OSError, e.what());
          break;
        default:
          PyErr_SetString(PyExc_RuntimeError, e.what());
      }
    }
  });

  m.def("bits_per_dim", &bits_per_dim, py::arg("log_likelihood"), py::arg("dims"),
        "Bits per dimension for a per-image log-likelihood in nats on 8-bit data.");

  m.def(
      "to_model_input",
      [](const FloatArray& pixels, bool train, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        return to_array(to_model_input<float>(to_tensor(pixels), train, train ? &rng : nullptr));
      },
      py::arg("pixels"), py::arg("train") = false, py::arg("seed") = 0);
  m.def(
      "to_image", [](const FloatArray& x) { return to_image(to_tensor(x)); }, py::arg("x"),
      "Model-space values back to 8-bit pixels, flattened.");

  m.def(
      "singular_values",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
        if (a.ndim() != 2) fail(ErrorKind::kShapeMismatch, "singular_values expects a matrix");
        Tensor<double> t({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                         std::vector<double>(a.data(), a.data() + a.size()));
        return singular_values(t);
      },
      py::arg("matrix"));
  m.def(
      "svd_truncate",
      [](const FloatArray& image, const std::string& setting) {
        return to_array(svd_truncate(to_tensor(image), SvdConfig::parse(setting)));
      },
      py::arg("image"), py::arg("setting"), "Per-channel truncation; setting is 'energy:0.95', 'rank:3' or 'off'.");

  m.def(
      "sha256_hex",
      [](const py::bytes& b) {
        const std::string s = b;
        return sha256_hex({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
      },
      py::arg("data"));
  m.def(
      "write_idx_images",
      [](const std::filesystem::path& path, const FloatArray& pixels) { write_idx_images(path, split_items(pixels)); },
      py::arg("path"), py::arg("pixels"));
  m.def(
      "read_idx_images",
      [](const std::filesystem::path& path) {
        const auto imgs = read_idx(path);
        if (imgs.empty()) return FloatArray(std::vector<py::ssize_t>{0, 1, 0, 0});
        const Shape s = imgs.front().shape();
        FloatArray out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(imgs.size()), static_cast<py::ssize_t>(s[0]),
                                                static_cast<py::ssize_t>(s[1]), static_cast<py::ssize_t>(s[2])});
        float* dst = out.mutable_data();
        for (const auto& img : imgs) dst = std::copy(img.data().begin(), img.data().end(), dst);
        return out;
      },
      py::arg("path"));

  py::class_<SuiteResult>(m, "SuiteResult")
      .def_readonly("name", &SuiteResult::name)
      .def_readonly("passed", &SuiteResult::passed)
      .def_readonly("detail", &SuiteResult::detail)
      .def_readonly("seed", &SuiteResult::seed)
      .def_readonly("seconds", &SuiteResult::seconds);
  m.def("run_checks", &run_checks, py::arg("seed") = 0, py::arg("deep") = false);

  py::class_<MetricsRow>(m, "MetricsRow")
      .def_readonly("epoch", &MetricsRow::epoch)
      .def_readonly("nll_nats", &MetricsRow::nll_nats)
      .def_readonly("bits_per_dim", &MetricsRow::bits_per_dim)
      .def_readonly("seconds", &MetricsRow::seconds)
      .def_readonly("lr", &MetricsRow::lr);

  py::class_<FlowModel<float>>(m, "Model")
      .def(py::init([](std::size_t height, std::size_t width, std::size_t channels, std::size_t levels,
                       std::size_t depth, std::size_t hidden, const std::string& coupling, const std::string& conv,
                       std::size_t num_classes, const std::string& svd, std::uint64_t seed) {
             ArchitectureConfig a;
             a.height = height;
             a.width = width;
             a.channels = channels;
             a.levels = levels;
             a.depth = depth;
             a.hidden = hidden;
             a.coupling = parse_coupling_kind(coupling);
             a.conv = parse_conv_kind(conv);
             a.conditional = num_classes > 0;
             if (num_classes > 0) a.num_classes = num_classes;
             a.svd = SvdConfig::parse(svd);
             return std::make_unique<FlowModel<float>>(a, seed);
           }),
           py::arg("height") = 32, py::arg("width") = 32, py::arg("channels") = 1, py::arg("levels") = 2,
           py::arg("depth") = 4, py::arg("hidden") = 64, py::arg("coupling") = "bplf", py::arg("conv") = "3x3",
           py::arg("num_classes") = 0, py::arg("svd") = "off", py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& dir) { return model_from_checkpoint<float>(read_checkpoint(dir)); },
          py::arg("directory"))
      .def(
          "save",
          [](FlowModel<float>& self, const std::filesystem::path& dir, const std::vector<std::string>& class_names,
             std::size_t epoch) { save_checkpoint(self, dir, class_names, epoch); },
          py::arg("directory"), py::arg("class_names") = std::vector<std::string>{}, py::arg("epoch") = 0)
      .def_property_readonly("dimensions", [](const FlowModel<float>& self) { return self.config().dimensions(); })
      .def_property_readonly("conditional", [](const FlowModel<float>& self) { return self.config().conditional; })
      .def(
          "log_likelihood",
          [](FlowModel<float>& self, const FloatArray& x, std::optional<std::vector<std::size_t>> labels) {
            return to_array(self.log_likelihood(to_tensor(x), make_condition(self, labels)));
          },
          py::arg("x"), py::arg("labels") = py::none(), "Per-item log-likelihood in nats for model-space input.")
      .def(
          "encode",
          [](FlowModel<float>& self, const FloatArray& x, std::optional<std::vector<std::size_t>> labels) {
            auto enc = self.encode(to_tensor(x), make_condition(self, labels));
            py::list parts;
            for (const auto& p : enc.parts) parts.append(to_array(p));
            return py::make_tuple(parts, to_array(enc.log_det));
          },
          py::arg("x"), py::arg("labels") = py::none(), "Returns (latent parts, log-det).")
      .def(
          "decode",
          [](FlowModel<float>& self, const std::vector<FloatArray>& parts,
             std::optional<std::vector<std::size_t>> labels) {
            LatentParts<float> z;
            for (const auto& p : parts) z.push_back(to_tensor(p));
            return to_array(self.decode(z, make_condition(self, labels)));
          },
          py::arg("parts"), py::arg("labels") = py::none())
      .def(
          "sample",
          [](FlowModel<float>& self, std::size_t count, std::optional<std::size_t> label, double temperature,
             std::uint64_t seed) {
            py::list out;
            for (const auto& t : self.sample(count, label, temperature, seed)) out.append(to_array(t));
            return out;
          },
          py::arg("count"), py::arg("label") = py::none(), py::arg("temperature") = 0.7, py::arg("seed") = 0)
      .def(
          "train",
          [](FlowModel<float>& self, const FloatArray& pixels, std::optional<std::vector<std::size_t>> labels,
             std::size_t epochs, std::size_t batch_size, double learning_rate, std::uint64_t seed,
             std::optional<std::filesystem::path> out_dir) {
            TrainConfig cfg;
            cfg.epochs = epochs;
            cfg.batch_size = batch_size;
            cfg.learning_rate = learning_rate;
            cfg.seed = seed;
            cfg.out_dir = out_dir;
            const ImageSet set = make_set(pixels, labels);
            py::gil_scoped_release release;
            return train(self, set, {}, cfg).metrics;
          },
          py::arg("pixels"), py::arg("labels") = py::none(), py::arg("epochs") = 1, py::arg("batch_size") = 64,
          py::arg("learning_rate") = 1e-3, py::arg("seed") = 0, py::arg("out_dir") = py::none(),
          "Trains on 8-bit pixel arrays [N,C,H,W]; returns the metrics rows.")
      .def(
          "evaluate",
          [](FlowModel<float>& self, const FloatArray& pixels, std::optional<std::vector<std::size_t>> labels) {
            const auto r = evaluate(self, make_set(pixels, labels));
            return py::make_tuple(r.nll_nats, r.bits_per_dim);
          },
          py::arg("pixels"), py::arg("labels") = py::none(), "Returns (mean NLL in nats, bits/dim).");

  m.def("set_worker_threads", &set_worker_threads, py::arg("count"));
}
