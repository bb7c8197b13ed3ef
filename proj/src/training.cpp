#include "structconv/training.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "structconv/error.hpp"

namespace structconv {

// Structural regularization ---------------------------------------------------

namespace {

// (I - AA+) applied to every kernel of `weights`.
Tensor off_structure(const Tensor& weights, const StructuredConfig& cfg) {
  const std::size_t count = kernel_count(weights, cfg);
  const auto sm = structure_matrix(cfg);
  const std::size_t len = cfg.kernel_numel();
  Tensor out(weights.shape());
  for (std::size_t k = 0; k < count; ++k) {
    const Eigen::Map<const Eigen::VectorXd> w(weights.data().data() + k * len,
                                              static_cast<Eigen::Index>(len));
    Eigen::Map<Eigen::VectorXd> r(out.data().data() + k * len, static_cast<Eigen::Index>(len));
    r = w - sm->projector() * w;
  }
  return out;
}

}  // namespace

SrLoss sr_loss(std::span<const Tensor> weights, std::span<const StructuredConfig> cfgs) {
  if (weights.size() != cfgs.size()) throw ShapeError("sr_loss: one config per weight required");
  SrLoss out;
  out.per_layer.reserve(weights.size());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const double norm = weights[l].frobenius_norm();
    if (norm == 0.0) {
      throw Error("sr_loss: layer " + std::to_string(l) + " has zero norm (degenerate normalization)");
    }
    const double r = off_structure(weights[l], cfgs[l]).frobenius_norm() / norm;
    out.per_layer.push_back(r);
    out.total += r;
  }
  return out;
}

Tensor sr_grad(const Tensor& weights, const StructuredConfig& cfg) {
  const double norm = weights.frobenius_norm();
  if (norm == 0.0) throw Error("sr_grad: zero-norm weight (degenerate normalization)");
  const Tensor pw = off_structure(weights, cfg);
  const double pw_norm2 = std::inner_product(pw.values().begin(), pw.values().end(),
                                             pw.values().begin(), 0.0);
  const double pw_eps = std::sqrt(pw_norm2 + kSrEpsilon);
  const double a = 1.0 / (pw_eps * norm);
  const double b = pw_eps / (norm * norm * norm);
  Tensor g(weights.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = a * pw[i] - b * weights[i];
  return g;
}

// Model construction -------------------------------------------------------------

void ToyModelSpec::validate() const {
  if (input_shape.size() != 3) throw ShapeError("toy input must be C x H x W");
  std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  bool flat = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "toy layer " + std::to_string(i);
    switch (l.kind) {
      case ToyLayerKind::conv:
      case ToyLayerKind::dwconv: {
        if (flat) throw ShapeError(where + ": convolution after flattening");
        const std::size_t per_kernel = l.kind == ToyLayerKind::dwconv ? 1 : c;
        if (l.kind == ToyLayerKind::dwconv && l.out_channels != 0 && l.out_channels != c) {
          throw ShapeError(where + ": depthwise layer must keep the channel count");
        }
        StructuredConfig{per_kernel, l.kernel_size, l.alpha_channels, l.alpha_size}.validate();
        h = conv_output_extent(h, l.kernel_size, l.geom.stride[0], l.geom.padding[0], l.geom.dilation[0]);
        w = conv_output_extent(w, l.kernel_size, l.geom.stride[1], l.geom.padding[1], l.geom.dilation[1]);
        if (l.kind == ToyLayerKind::conv) c = l.out_channels;
        if (c == 0) throw ShapeError(where + ": zero output channels");
        break;
      }
      case ToyLayerKind::relu:
        break;
      case ToyLayerKind::global_avg_pool:
        h = w = 1;
        break;
      case ToyLayerKind::linear: {
        const std::size_t q = c * h * w;
        StructuredConfig{q, 1, l.alpha_channels, 1}.validate();
        if (l.out_channels == 0) throw ShapeError(where + ": zero outputs");
        c = l.out_channels;
        h = w = 1;
        flat = true;
        break;
      }
    }
  }
  if (!flat || c != classes) throw ShapeError("toy model must end in a linear layer with one output per class");
}

ToyModelSpec ToyModelSpec::default_student() {
  ToyModelSpec spec;
  auto same = ConvGeometry::uniform(1, 1, 1);
  spec.layers = {
      {ToyLayerKind::conv, "conv1", 16, 3, same, 2, 2},
      {ToyLayerKind::relu, "", 0, 1, {}, 1, 1},
      {ToyLayerKind::dwconv, "dw2", 16, 3, same, 1, 2},
      {ToyLayerKind::relu, "", 0, 1, {}, 1, 1},
      {ToyLayerKind::conv, "pw3", 16, 1, ConvGeometry{}, 8, 1},
      {ToyLayerKind::relu, "", 0, 1, {}, 1, 1},
      {ToyLayerKind::global_avg_pool, "", 0, 1, {}, 1, 1},
      {ToyLayerKind::linear, "fc", 4, 1, {}, 8, 1},
  };
  return spec;
}

namespace {

struct LayerShapes {
  Shape weight;          // full weight shape
  StructuredConfig cfg;  // per-kernel structure
  ConvGeometry geom;     // with groups filled in
};

// Full weight shape, structure and geometry of every trainable spec layer.
std::vector<LayerShapes> trainable_shapes(const ToyModelSpec& spec) {
  spec.validate();
  std::vector<LayerShapes> out;
  std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case ToyLayerKind::conv: {
        LayerShapes s{{l.out_channels, c, l.kernel_size, l.kernel_size},
                      {c, l.kernel_size, l.alpha_channels, l.alpha_size}, l.geom};
        s.geom.groups = 1;
        out.push_back(s);
        c = l.out_channels;
        break;
      }
      case ToyLayerKind::dwconv: {
        LayerShapes s{{c, 1, l.kernel_size, l.kernel_size}, {1, l.kernel_size, 1, l.alpha_size}, l.geom};
        s.geom.groups = static_cast<int>(c);
        out.push_back(s);
        break;
      }
      case ToyLayerKind::linear: {
        const std::size_t q = c * h * w;
        out.push_back({{l.out_channels, q}, {q, 1, l.alpha_channels, 1}, {}});
        c = l.out_channels;
        h = w = 1;
        continue;
      }
      case ToyLayerKind::global_avg_pool:
        h = w = 1;
        continue;
      case ToyLayerKind::relu:
        continue;
    }
    h = conv_output_extent(h, l.kernel_size, l.geom.stride[0], l.geom.padding[0], l.geom.dilation[0]);
    w = conv_output_extent(w, l.kernel_size, l.geom.stride[1], l.geom.padding[1], l.geom.dilation[1]);
  }
  return out;
}

Tensor project_to_alpha(const Tensor& weight, const StructuredConfig& cfg, bool is_linear) {
  const auto sm = structure_matrix(cfg);
  const std::size_t count = weight.dim(0), len = cfg.kernel_numel(), alen = cfg.basis_count();
  Shape shape = is_linear ? Shape{count, alen}
                          : Shape{count, cfg.alpha_channels, cfg.alpha_size, cfg.alpha_size};
  Tensor alpha(shape);
  for (std::size_t k = 0; k < count; ++k) {
    const Eigen::VectorXd a = sm->coefficients(weight.data().subspan(k * len, len));
    std::copy(a.data(), a.data() + a.size(), alpha.data().begin() + static_cast<std::ptrdiff_t>(k * alen));
  }
  return alpha;
}

Tensor alpha_to_weight(const Tensor& alpha, const StructuredConfig& cfg, bool is_linear) {
  if (is_linear) return reconstruct_linear(alpha, cfg.channels);
  std::vector<Tensor> kernels;
  kernels.reserve(alpha.dim(0));
  for (std::size_t o = 0; o < alpha.dim(0); ++o) kernels.push_back(reconstruct(alpha.slice0(o), cfg));
  return stack(kernels);
}

// Builds ops for `spec`; params[l] is the full weight of trainable layer l, or
// its alpha / small matrix when `decomposed`.
Model assemble(const ToyModelSpec& spec, const std::vector<Tensor>& params,
               const std::vector<Tensor>& biases, bool decomposed) {
  const auto shapes = trainable_shapes(spec);
  Model m;
  m.spec = spec;
  m.decomposed = decomposed;
  std::size_t t = 0;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case ToyLayerKind::relu:
        m.ops.emplace_back(ReluOp{});
        break;
      case ToyLayerKind::global_avg_pool:
        m.ops.emplace_back(GlobalAvgPoolOp{});
        break;
      case ToyLayerKind::conv:
      case ToyLayerKind::dwconv: {
        const auto& s = shapes[t];
        if (decomposed) {
          m.ops.emplace_back(SumPoolOp{s.cfg.pool_dims(), ConvGeometry{{1, 1}, s.geom.padding, s.geom.dilation, 1}});
          m.ops.emplace_back(ConvOp{params[t], biases[t], ConvGeometry{s.geom.stride, {0, 0}, s.geom.dilation, s.geom.groups}});
        } else {
          m.ops.emplace_back(ConvOp{params[t], biases[t], s.geom});
        }
        m.layers.push_back({l.name.empty() ? "layer" + std::to_string(t) : l.name, m.ops.size() - 1, s.cfg, false});
        ++t;
        break;
      }
      case ToyLayerKind::linear: {
        const auto& s = shapes[t];
        if (decomposed) {
          m.ops.emplace_back(SumPoolOp{{s.cfg.channels - s.cfg.alpha_channels + 1, 1, 1}, ConvGeometry{}});
        }
        m.ops.emplace_back(LinearOp{params[t], biases[t]});
        m.layers.push_back({l.name.empty() ? "layer" + std::to_string(t) : l.name, m.ops.size() - 1, s.cfg, true});
        ++t;
        break;
      }
    }
  }
  return m;
}

const Tensor& op_weight(const Model& m, const LayerBinding& b) {
  if (const auto* c = std::get_if<ConvOp>(&m.ops[b.op_index])) return c->weight;
  return std::get<LinearOp>(m.ops[b.op_index]).weight;
}

const Tensor& op_bias(const Model& m, const LayerBinding& b) {
  if (const auto* c = std::get_if<ConvOp>(&m.ops[b.op_index])) return c->bias;
  return std::get<LinearOp>(m.ops[b.op_index]).bias;
}

}  // namespace

Model build_model(const ToyModelSpec& spec, std::uint64_t seed, bool decomposed) {
  const auto shapes = trainable_shapes(spec);
  CounterRng rng(seed);
  std::vector<Tensor> params, biases;
  for (const auto& s : shapes) {
    Tensor w(s.weight);
    const std::size_t fan_in = w.size() / s.weight[0];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    const bool is_linear = s.weight.size() == 2;
    params.push_back(decomposed ? project_to_alpha(w, s.cfg, is_linear) : std::move(w));
    biases.emplace_back(Shape{s.weight[0]});
  }
  return assemble(spec, params, biases, decomposed);
}

std::vector<Tensor> effective_weights(const Model& model) {
  std::vector<Tensor> out;
  out.reserve(model.layers.size());
  for (const auto& b : model.layers) {
    const Tensor& w = op_weight(model, b);
    out.push_back(model.decomposed ? alpha_to_weight(w, b.cfg, b.is_linear) : w);
  }
  return out;
}

std::vector<double> layer_residuals(const Model& model) {
  const auto weights = effective_weights(model);
  std::vector<double> out;
  out.reserve(weights.size());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(structure_residual(weights[l], model.layers[l].cfg));
  }
  return out;
}

Model materialize(const Model& model) {
  if (!model.decomposed) return model;
  std::vector<Tensor> biases;
  for (const auto& b : model.layers) biases.push_back(op_bias(model, b));
  return assemble(model.spec, effective_weights(model), biases, false);
}

DecomposedModel decompose_model(const Model& model, double residual_tol) {
  const Model full = materialize(model);
  DecomposedModel out;
  std::vector<Tensor> params, biases;
  for (const auto& b : full.layers) {
    try {
      if (b.is_linear) {
        const auto& op = std::get<LinearOp>(full.ops[b.op_index]);
        auto d = decompose_linear(op.weight, b.cfg.alpha_channels, residual_tol, op.bias);
        out.residuals.push_back(structure_residual(op.weight, b.cfg));
        params.push_back(std::move(d.small));
        biases.push_back(*d.bias);
      } else {
        const auto& op = std::get<ConvOp>(full.ops[b.op_index]);
        auto d = decompose_conv_layer(op.weight, b.cfg, op.geom, residual_tol, op.bias);
        out.residuals.push_back(structure_residual(op.weight, b.cfg));
        params.push_back(std::move(d.alpha));
        biases.push_back(*d.bias);
      }
    } catch (const ResidualError& e) {
      throw ResidualError("layer '" + b.name + "': " + e.what(), e.worst_index(), e.worst_residual());
    }
  }
  out.model = assemble(full.spec, params, biases, true);
  return out;
}

// Forward / backward -------------------------------------------------------------

namespace {

std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::ptrdiff_t out_extent, std::ptrdiff_t extent,
                                                      int s, int p, std::ptrdiff_t off) {
  const std::ptrdiff_t shift = p - off;
  std::ptrdiff_t lo = shift <= 0 ? 0 : (shift + s - 1) / s;
  const std::ptrdiff_t top = extent - 1 + shift;
  std::ptrdiff_t hi = top < 0 ? 0 : top / s + 1;
  lo = std::min(lo, out_extent);
  hi = std::clamp(hi, lo, out_extent);
  return {lo, hi};
}

Tensor apply_op(const Op& op, const Tensor& x) {
  return std::visit(
      [&](const auto& o) -> Tensor {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, ConvOp>) {
          return add_channel_bias(conv(x, o.weight, o.geom), o.bias);
        } else if constexpr (std::is_same_v<T, SumPoolOp>) {
          return sum_pool3d(x, o.dims, o.geom);
        } else if constexpr (std::is_same_v<T, ReluOp>) {
          Tensor y = x;
          for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
          return y;
        } else if constexpr (std::is_same_v<T, GlobalAvgPoolOp>) {
          const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
          Tensor y({c, 1, 1});
          for (std::size_t k = 0; k < c; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += x[k * hw + i];
            y[k] = s / static_cast<double>(hw);
          }
          return y;
        } else {
          Tensor y = linear(o.weight, x.reshaped({x.size()}));
          for (std::size_t i = 0; i < y.size(); ++i) y[i] += o.bias[i];
          return y.reshaped({y.size(), 1, 1});
        }
      },
      op);
}

void conv_backward(const Tensor& x, const ConvOp& op, const Tensor& dy, Tensor& dx, Tensor& dw, Tensor& db) {
  const auto& w = op.weight;
  const auto& g = op.geom;
  const std::size_t height = x.dim(1), width = x.dim(2);
  const std::size_t out_ch = w.dim(0), cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = dy.dim(1), ow = dy.dim(2);
  const std::size_t cout_g = out_ch / static_cast<std::size_t>(g.groups);
  dx = Tensor(x.shape());
  dw = Tensor(w.shape());
  db = Tensor({out_ch});
  for (std::size_t o = 0; o < out_ch; ++o) {
    const double* dyo = dy.data().data() + o * oh * ow;
    double s = 0.0;
    for (std::size_t i = 0; i < oh * ow; ++i) s += dyo[i];
    db[o] = s;
    const std::size_t grp = o / cout_g;
    for (std::size_t ci = 0; ci < cin_g; ++ci) {
      const std::size_t ch = grp * cin_g + ci;
      const double* xc = x.data().data() + ch * height * width;
      double* dxc = dx.data().data() + ch * height * width;
      for (std::size_t u = 0; u < kh; ++u) {
        const auto roff = static_cast<std::ptrdiff_t>(u) * g.dilation[0];
        const auto [ilo, ihi] = valid_range(static_cast<std::ptrdiff_t>(oh), static_cast<std::ptrdiff_t>(height),
                                            g.stride[0], g.padding[0], roff);
        for (std::size_t v = 0; v < kw; ++v) {
          const auto coff = static_cast<std::ptrdiff_t>(v) * g.dilation[1];
          const auto [jlo, jhi] = valid_range(static_cast<std::ptrdiff_t>(ow), static_cast<std::ptrdiff_t>(width),
                                              g.stride[1], g.padding[1], coff);
          const std::size_t widx = ((o * cin_g + ci) * kh + u) * kw + v;
          const double wv = w[widx];
          double acc = 0.0;
          for (std::ptrdiff_t i = ilo; i < ihi; ++i) {
            const std::ptrdiff_t r = i * g.stride[0] - g.padding[0] + roff;
            const double* xr = xc + r * static_cast<std::ptrdiff_t>(width);
            double* dxr = dxc + r * static_cast<std::ptrdiff_t>(width);
            const double* dyr = dyo + i * static_cast<std::ptrdiff_t>(ow);
            for (std::ptrdiff_t j = jlo; j < jhi; ++j) {
              const std::ptrdiff_t col = j * g.stride[1] - g.padding[1] + coff;
              acc += dyr[j] * xr[col];
              dxr[col] += dyr[j] * wv;
            }
          }
          dw[widx] = acc;
        }
      }
    }
  }
}

Tensor sum_pool_backward(const Tensor& x, const SumPoolOp& op, const Tensor& dy) {
  Tensor dx(x.shape());
  const std::size_t height = x.dim(1), width = x.dim(2);
  const std::size_t oc = dy.dim(0), oh = dy.dim(1), ow = dy.dim(2);
  const auto& g = op.geom;
  for (std::size_t c = 0; c < oc; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const double gv = dy.at(c, i, j);
        for (std::size_t a = 0; a < op.dims.channels; ++a) {
          for (std::size_t u = 0; u < op.dims.height; ++u) {
            const auto r = static_cast<std::ptrdiff_t>(i) * g.stride[0] - g.padding[0] +
                           static_cast<std::ptrdiff_t>(u) * g.dilation[0];
            if (r < 0 || r >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t v = 0; v < op.dims.width; ++v) {
              const auto col = static_cast<std::ptrdiff_t>(j) * g.stride[1] - g.padding[1] +
                               static_cast<std::ptrdiff_t>(v) * g.dilation[1];
              if (col < 0 || col >= static_cast<std::ptrdiff_t>(width)) continue;
              dx.at(c + a, static_cast<std::size_t>(r), static_cast<std::size_t>(col)) += gv;
            }
          }
        }
      }
    }
  }
  return dx;
}

// Softmax cross-entropy; writes d loss / d logits.
double softmax_xent(const Tensor& logits, int label, Tensor* grad) {
  const std::size_t k = logits.size();
  double mx = logits[0];
  for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += std::exp(logits[i] - mx);
  const double log_z = mx + std::log(z);
  if (grad) {
    *grad = Tensor(logits.shape());
    for (std::size_t i = 0; i < k; ++i) (*grad)[i] = std::exp(logits[i] - log_z);
    (*grad)[static_cast<std::size_t>(label)] -= 1.0;
  }
  return log_z - logits[static_cast<std::size_t>(label)];
}

std::size_t argmax(const Tensor& t) {
  return static_cast<std::size_t>(std::max_element(t.values().begin(), t.values().end()) - t.values().begin());
}

}  // namespace

Tensor forward(const Model& model, const Tensor& input) {
  Tensor x = input;
  for (const auto& op : model.ops) x = apply_op(op, x);
  return x.reshaped({x.size()});
}

SampleGradient sample_gradient(const Model& model, const Tensor& input, int label) {
  std::vector<Tensor> acts;
  acts.reserve(model.ops.size() + 1);
  acts.push_back(input);
  for (const auto& op : model.ops) acts.push_back(apply_op(op, acts.back()));

  SampleGradient out;
  out.weight_grads.resize(model.ops.size());
  out.bias_grads.resize(model.ops.size());
  Tensor dy;
  out.loss = softmax_xent(acts.back().reshaped({acts.back().size()}), label, &dy);
  dy = dy.reshaped(acts.back().shape());

  for (std::size_t k = model.ops.size(); k-- > 0;) {
    const Tensor& x = acts[k];
    const Op& op = model.ops[k];
    if (const auto* c = std::get_if<ConvOp>(&op)) {
      Tensor dx;
      conv_backward(x, *c, dy, dx, out.weight_grads[k], out.bias_grads[k]);
      dy = std::move(dx);
    } else if (const auto* p = std::get_if<SumPoolOp>(&op)) {
      dy = sum_pool_backward(x, *p, dy);
    } else if (std::holds_alternative<ReluOp>(op)) {
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (!(x[i] > 0.0)) dy[i] = 0.0;
      }
    } else if (std::holds_alternative<GlobalAvgPoolOp>(op)) {
      const std::size_t hw = x.dim(1) * x.dim(2);
      Tensor dx(x.shape());
      for (std::size_t c = 0; c < x.dim(0); ++c) {
        for (std::size_t i = 0; i < hw; ++i) dx[c * hw + i] = dy[c] / static_cast<double>(hw);
      }
      dy = std::move(dx);
    } else {
      const auto& l = std::get<LinearOp>(op);
      const std::size_t p = l.weight.dim(0), q = l.weight.dim(1);
      Tensor dw({p, q});
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < q; ++j) {
          dw[i * q + j] = dy[i] * x[j];
          dx[j] += l.weight[i * q + j] * dy[i];
        }
      }
      out.weight_grads[k] = std::move(dw);
      out.bias_grads[k] = dy.reshaped({p});
      dy = std::move(dx);
    }
  }
  return out;
}

Evaluation evaluate(const Model& model, const Dataset& data) {
  if (data.size() == 0) return {};
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor logits = forward(model, data.inputs[i]);
    if (argmax(logits) == static_cast<std::size_t>(data.labels[i])) ++correct;
    loss += softmax_xent(logits, data.labels[i], nullptr);
  }
  const auto n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, loss / n};
}

std::vector<std::size_t> class_histogram(const Dataset& data, std::size_t classes) {
  std::vector<std::size_t> h(classes, 0);
  for (int label : data.labels) ++h.at(static_cast<std::size_t>(label));
  return h;
}

// Training -----------------------------------------------------------------------

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::regularized: return "regularized";
    case TrainMode::direct: return "direct";
    case TrainMode::plain: return "plain";
  }
  return "?";
}

TrainMode parse_train_mode(std::string_view text) {
  if (text == "regularized") return TrainMode::regularized;
  if (text == "direct") return TrainMode::direct;
  if (text == "plain") return TrainMode::plain;
  throw ParseError("unknown training mode '" + std::string(text) + "'");
}

double TrainLog::final_mean_residual() const {
  if (epochs.empty() || epochs.back().residuals.empty()) return 0.0;
  const auto& r = epochs.back().residuals;
  return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
}

std::string TrainLog::to_jsonl() const {
  using nlohmann::ordered_json;
  std::ostringstream os;
  for (const auto& e : epochs) {
    ordered_json j{{"type", "epoch"},        {"epoch", e.epoch},       {"task_loss", e.task_loss},
                   {"sr_loss", e.sr_loss},   {"residuals", e.residuals}, {"eval_accuracy", e.eval_accuracy}};
    os << j.dump() << '\n';
  }
  ordered_json summary{{"type", "summary"},
                       {"mode", mode},
                       {"lambda", lambda},
                       {"seed", seed},
                       {"layers", layer_names},
                       {"final_mean_residual", final_mean_residual()},
                       {"acc_pre", acc_pre},
                       {"acc_post", acc_post},
                       {"decomposition_residuals", decomposition_residuals}};
  os << summary.dump() << '\n';
  return os.str();
}

TrainResult train(const ToyModelSpec& spec, const ToyData& data, TrainingConfig config) {
  if (config.lambda < 0.0) throw ConstraintError("lambda must be >= 0");
  if (config.batch_size == 0) throw ConstraintError("batch size must be positive");
  if (config.mode != TrainMode::regularized) config.lambda = config.mode == TrainMode::plain ? 0.0 : config.lambda;
  const bool direct = config.mode == TrainMode::direct;
  const double lambda = direct ? 0.0 : config.lambda;

  TrainResult result{build_model(spec, config.seed, direct), {}};
  Model& model = result.model;
  TrainLog& log = result.log;
  log.mode = std::string(to_string(config.mode));
  log.lambda = config.lambda;
  log.seed = config.seed;
  for (const auto& b : model.layers) log.layer_names.push_back(b.name);

  const std::size_t n = data.train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<StructuredConfig> cfgs;
  for (const auto& b : model.layers) cfgs.push_back(b.cfg);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    CounterRng shuffle(splitmix64_mix(config.seed ^ 0x5348554646ULL), epoch << 32);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      std::vector<Tensor> gw(model.ops.size()), gb(model.ops.size());
      double batch_loss = 0.0;
      for (std::size_t s = start; s < stop; ++s) {
        const std::size_t idx = order[s];
        auto g = sample_gradient(model, data.train.inputs[idx], data.train.labels[idx]);
        batch_loss += g.loss;
        for (std::size_t k = 0; k < model.ops.size(); ++k) {
          if (g.weight_grads[k].empty()) continue;
          if (gw[k].empty()) {
            gw[k] = std::move(g.weight_grads[k]);
            gb[k] = std::move(g.bias_grads[k]);
          } else {
            gw[k] = axpby(1.0, gw[k], 1.0, g.weight_grads[k]);
            gb[k] = axpby(1.0, gb[k], 1.0, g.bias_grads[k]);
          }
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      batch_loss *= inv;
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError("non-finite task loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches));
      }
      if (lambda > 0.0) {
        for (const auto& b : model.layers) {
          const Tensor sg = sr_grad(op_weight(model, b), b.cfg);
          gw[b.op_index] = axpby(inv, gw[b.op_index], lambda, sg);
          gb[b.op_index] = axpby(inv, gb[b.op_index], 0.0, gb[b.op_index]);
        }
      } else {
        for (const auto& b : model.layers) {
          gw[b.op_index] = axpby(inv, gw[b.op_index], 0.0, gw[b.op_index]);
          gb[b.op_index] = axpby(inv, gb[b.op_index], 0.0, gb[b.op_index]);
        }
      }
      for (const auto& b : model.layers) {
        auto step = [&](Tensor& p, const Tensor& g) {
          for (std::size_t i = 0; i < p.size(); ++i) p[i] -= config.learning_rate * g[i];
        };
        std::visit(
            [&](auto& o) {
              using T = std::decay_t<decltype(o)>;
              if constexpr (std::is_same_v<T, ConvOp> || std::is_same_v<T, LinearOp>) {
                step(o.weight, gw[b.op_index]);
                step(o.bias, gb[b.op_index]);
              }
            },
            model.ops[b.op_index]);
      }
      loss_sum += batch_loss;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.task_loss = loss_sum / static_cast<double>(batches);
    rec.residuals = layer_residuals(model);
    rec.sr_loss = std::accumulate(rec.residuals.begin(), rec.residuals.end(), 0.0);
    rec.eval_accuracy = evaluate(model, data.test).accuracy;
    if (!std::isfinite(rec.task_loss) || !std::isfinite(rec.sr_loss)) {
      throw DivergenceError("non-finite loss after epoch " + std::to_string(epoch));
    }
    log.epochs.push_back(std::move(rec));
  }

  log.acc_pre = evaluate(materialize(model), data.test).accuracy;
  const auto decomposed = decompose_model(model, 1.0);
  log.acc_post = evaluate(decomposed.model, data.test).accuracy;
  log.decomposition_residuals = decomposed.residuals;
  return result;
}

}  // namespace structconv
