#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "structconv/analyzer.hpp"
#include "structconv/commands.hpp"
#include "structconv/error.hpp"
#include "structconv/structured.hpp"
#include "structconv/training.hpp"

namespace py = pybind11;
using namespace structconv;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
// (C, N, c, n)
using ConfigTuple = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

StructuredConfig to_config(const ConfigTuple& t) {
  const auto [C, N, c, n] = t;
  StructuredConfig cfg{C, N, c, n};
  cfg.validate();
  return cfg;
}

std::optional<Tensor> maybe_tensor(const std::optional<Array>& a) {
  if (!a) return std::nullopt;
  return to_tensor(*a);
}

py::dict cost_dict(const CostReport& r) {
  py::dict d;
  d["params_before"] = r.params_before;
  d["params_after"] = r.params_after;
  d["mults_before"] = r.mults_before;
  d["mults_after"] = r.mults_after;
  d["adds_before"] = r.adds_before;
  d["adds_after"] = r.adds_after;
  d["compression_ratio"] = py::make_tuple(r.compression_ratio.num, r.compression_ratio.den);
  return d;
}

}  // namespace

PYBIND11_MODULE(_structconv, m) {
  m.doc() = "Structured convolutions: sum-pool decomposition, cost model and toy training";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", error);
  py::register_exception<FormatError>(m, "FormatError", error);
  py::register_exception<ParseError>(m, "ParseError", error);
  py::register_exception<ConstraintError>(m, "ConstraintError", error);
  py::register_exception<ResidualError>(m, "ResidualError", error);
  py::register_exception<DivergenceError>(m, "DivergenceError", error);

  m.def("random_tensor", [](std::uint64_t seed, const Shape& shape) { return to_array(random_tensor(seed, shape)); },
        py::arg("seed"), py::arg("shape"));

  m.def(
      "conv",
      [](const Array& x, const Array& w, int stride, int padding, int dilation, int groups) {
        return to_array(conv(to_tensor(x), to_tensor(w), ConvGeometry::uniform(stride, padding, dilation, groups)));
      },
      py::arg("x"), py::arg("weight"), py::arg("stride") = 1, py::arg("padding") = 0, py::arg("dilation") = 1,
      py::arg("groups") = 1);

  m.def(
      "sum_pool3d",
      [](const Array& x, std::tuple<std::size_t, std::size_t, std::size_t> window, int padding, int dilation) {
        const auto [c, h, w] = window;
        return to_array(sum_pool3d(to_tensor(x), {c, h, w}, ConvGeometry::uniform(1, padding, dilation)));
      },
      py::arg("x"), py::arg("window"), py::arg("padding") = 0, py::arg("dilation") = 1);

  m.def(
      "reconstruct", [](const Array& alpha, const ConfigTuple& cfg) {
        return to_array(reconstruct(to_tensor(alpha), to_config(cfg)));
      },
      py::arg("alpha"), py::arg("config"), "C x N x N kernel from c x n x n coefficients; config is (C, N, c, n).");

  m.def(
      "structure_residual",
      [](const Array& w, const ConfigTuple& cfg) {
        return structure_residual(to_tensor(w), to_config(cfg));
      },
      py::arg("weights"), py::arg("config"));

  m.def(
      "structure_matrix",
      [](const ConfigTuple& cfg) {
        const auto sm = structure_matrix(to_config(cfg));
        return py::make_tuple(sm->matrix(), sm->pseudo_inverse());
      },
      py::arg("config"), "(A, pinv(A)) for a structure config.");

  py::class_<DecomposedConvLayer>(m, "DecomposedConv")
      .def_property_readonly("alpha", [](const DecomposedConvLayer& l) { return to_array(l.alpha); })
      .def_property_readonly("pool_window",
                             [](const DecomposedConvLayer& l) {
                               return py::make_tuple(l.pool_dims.channels, l.pool_dims.height, l.pool_dims.width);
                             })
      .def_readonly("residuals", &DecomposedConvLayer::residuals)
      .def("__call__", [](const DecomposedConvLayer& l, const Array& x) {
        return to_array(forward_decomposed(to_tensor(x), l));
      });

  m.def(
      "decompose_conv",
      [](const Array& w, const ConfigTuple& cfg, int stride,
         int padding, int dilation, int groups, const std::optional<Array>& bias, double max_residual) {
        return decompose_conv_layer(to_tensor(w), to_config(cfg), ConvGeometry::uniform(stride, padding, dilation, groups),
                                    max_residual, maybe_tensor(bias));
      },
      py::arg("weights"), py::arg("config"), py::arg("stride") = 1, py::arg("padding") = 0, py::arg("dilation") = 1,
      py::arg("groups") = 1, py::arg("bias") = py::none(), py::arg("max_residual") = kExactResidualTolerance);

  py::class_<DecomposedLinearLayer>(m, "DecomposedLinear")
      .def_property_readonly("small", [](const DecomposedLinearLayer& l) { return to_array(l.small); })
      .def_readonly("residuals", &DecomposedLinearLayer::residuals)
      .def("__call__", [](const DecomposedLinearLayer& l, const Array& x) {
        return to_array(forward_linear(to_tensor(x), l));
      });

  m.def(
      "decompose_linear",
      [](const Array& w, std::size_t reduced, const std::optional<Array>& bias, double max_residual) {
        return decompose_linear(to_tensor(w), reduced, max_residual, maybe_tensor(bias));
      },
      py::arg("weights"), py::arg("reduced"), py::arg("bias") = py::none(),
      py::arg("max_residual") = kExactResidualTolerance);

  m.def(
      "sr_loss",
      [](const std::vector<Array>& ws, const std::vector<ConfigTuple>& cfgs) {
        std::vector<Tensor> t;
        std::vector<StructuredConfig> c;
        for (const auto& w : ws) t.push_back(to_tensor(w));
        for (const auto& x : cfgs) c.push_back(to_config(x));
        const auto loss = sr_loss(t, c);
        return py::make_tuple(loss.total, loss.per_layer);
      },
      py::arg("weights"), py::arg("configs"));

  m.def(
      "sr_grad",
      [](const Array& w, const ConfigTuple& cfg) {
        return to_array(sr_grad(to_tensor(w), to_config(cfg)));
      },
      py::arg("weights"), py::arg("config"));

  m.def(
      "analyze",
      [](const std::string& path, std::size_t height, std::size_t width) {
        const auto layers = parse_network_spec(path, height, width);
        std::vector<CostReport> reports;
        py::list rows;
        for (const auto& l : layers) {
          reports.push_back(layer_costs(l));
          auto d = cost_dict(reports.back());
          d["index"] = l.index;
          d["kind"] = std::string(to_string(l.kind));
          rows.append(d);
        }
        return py::make_tuple(rows, cost_dict(aggregate(reports).totals));
      },
      py::arg("config"), py::arg("height") = 224, py::arg("width") = 224,
      "Per-layer cost dicts and network totals for a layer table.");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "structconv");
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a structconv subcommand; returns (exit code, stdout, stderr).");
}
