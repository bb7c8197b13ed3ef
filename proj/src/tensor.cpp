#include "structconv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "structconv/error.hpp"

namespace structconv {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Tensor::Tensor(std::initializer_list<std::size_t> shape) : Tensor(Shape(shape)) {}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice0(std::size_t index) const {
  if (rank() < 2 || index >= shape_[0]) throw ShapeError("slice0 index out of range");
  Shape inner(shape_.begin() + 1, shape_.end());
  const std::size_t n = shape_numel(inner);
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(index * n);
  return Tensor(std::move(inner), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

double Tensor::frobenius_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return std::sqrt(s);
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("cannot stack an empty list");
  Shape shape = parts.front().shape();
  std::vector<double> data;
  data.reserve(parts.size() * parts.front().size());
  for (const auto& p : parts) {
    if (p.shape() != shape) throw ShapeError("stack: mismatched shapes");
    data.insert(data.end(), p.values().begin(), p.values().end());
  }
  shape.insert(shape.begin(), parts.size());
  return Tensor(std::move(shape), std::move(data));
}

Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
  if (x.shape() != y.shape()) throw ShapeError("axpby: shape mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

double max_relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_relative_error: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  const double scale = b.max_abs();
  return scale > 0.0 ? diff / scale : diff;
}

void ConvGeometry::validate() const {
  for (int axis = 0; axis < 2; ++axis) {
    if (stride[axis] < 1) throw ShapeError("stride must be >= 1");
    if (padding[axis] < 0) throw ShapeError("padding must be >= 0");
    if (dilation[axis] < 1) throw ShapeError("dilation must be >= 1");
  }
  if (groups < 1) throw ShapeError("groups must be >= 1");
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, int stride, int padding,
                               int dilation) {
  const auto span = static_cast<std::ptrdiff_t>(in) + 2 * padding -
                    static_cast<std::ptrdiff_t>(dilation) * (static_cast<std::ptrdiff_t>(kernel) - 1) -
                    1;
  if (span < 0) {
    throw ShapeError("non-positive output extent: input " + std::to_string(in) + ", kernel " +
                     std::to_string(kernel) + ", padding " + std::to_string(padding) +
                     ", dilation " + std::to_string(dilation));
  }
  return static_cast<std::size_t>(span / stride) + 1;
}

namespace {

// Output index range [lo, hi) for which in = i*s - p + off stays inside [0, extent).
std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::ptrdiff_t out_extent,
                                                      std::ptrdiff_t extent, int s, int p,
                                                      std::ptrdiff_t off) {
  const std::ptrdiff_t shift = p - off;  // need i*s >= shift and i*s <= extent - 1 + shift
  std::ptrdiff_t lo = shift <= 0 ? 0 : (shift + s - 1) / s;
  std::ptrdiff_t top = extent - 1 + shift;
  std::ptrdiff_t hi = top < 0 ? 0 : top / s + 1;
  lo = std::min(lo, out_extent);
  hi = std::clamp(hi, lo, out_extent);
  return {lo, hi};
}

}  // namespace

Tensor conv(const Tensor& input, const Tensor& kernel, const ConvGeometry& geom) {
  geom.validate();
  if (input.rank() != 3) throw ShapeError("conv input must be C x H x W, got " + shape_str(input.shape()));
  if (kernel.rank() != 4) {
    throw ShapeError("conv kernel must be C_out x C x kh x kw, got " + shape_str(kernel.shape()));
  }
  const std::size_t channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  const std::size_t out_ch = kernel.dim(0), group_in = kernel.dim(1);
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  const auto groups = static_cast<std::size_t>(geom.groups);
  if (channels % groups != 0 || out_ch % groups != 0 || group_in * groups != channels) {
    throw ShapeError("conv channel mismatch: input " + shape_str(input.shape()) + ", kernel " +
                     shape_str(kernel.shape()) + ", groups " + std::to_string(groups));
  }
  const std::size_t oh = conv_output_extent(height, kh, geom.stride[0], geom.padding[0], geom.dilation[0]);
  const std::size_t ow = conv_output_extent(width, kw, geom.stride[1], geom.padding[1], geom.dilation[1]);
  const std::size_t group_out = out_ch / groups;

  Tensor out({out_ch, oh, ow});
  const double* x = input.data().data();
  const double* k = kernel.data().data();
  double* y = out.data().data();
  const int sh = geom.stride[0], sw = geom.stride[1];

  for (std::size_t o = 0; o < out_ch; ++o) {
    const std::size_t g = o / group_out;
    double* yo = y + o * oh * ow;
    for (std::size_t ci = 0; ci < group_in; ++ci) {
      const double* xc = x + (g * group_in + ci) * height * width;
      for (std::size_t u = 0; u < kh; ++u) {
        const auto row_off = static_cast<std::ptrdiff_t>(u) * geom.dilation[0];
        const auto [ilo, ihi] = valid_range(static_cast<std::ptrdiff_t>(oh),
                                            static_cast<std::ptrdiff_t>(height), sh,
                                            geom.padding[0], row_off);
        for (std::size_t v = 0; v < kw; ++v) {
          const double w = k[((o * group_in + ci) * kh + u) * kw + v];
          const auto col_off = static_cast<std::ptrdiff_t>(v) * geom.dilation[1];
          const auto [jlo, jhi] = valid_range(static_cast<std::ptrdiff_t>(ow),
                                              static_cast<std::ptrdiff_t>(width), sw,
                                              geom.padding[1], col_off);
          for (std::ptrdiff_t i = ilo; i < ihi; ++i) {
            const std::ptrdiff_t r = i * sh - geom.padding[0] + row_off;
            const double* xr = xc + r * static_cast<std::ptrdiff_t>(width);
            double* yr = yo + i * static_cast<std::ptrdiff_t>(ow);
            for (std::ptrdiff_t j = jlo; j < jhi; ++j) {
              yr[j] += w * xr[j * sw - geom.padding[1] + col_off];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor add_channel_bias(Tensor output, const Tensor& bias) {
  if (output.rank() < 1 || bias.size() != output.dim(0)) {
    throw ShapeError("bias length " + std::to_string(bias.size()) + " does not match output " +
                     shape_str(output.shape()));
  }
  const std::size_t per = output.size() / output.dim(0);
  for (std::size_t o = 0; o < output.dim(0); ++o) {
    for (std::size_t i = 0; i < per; ++i) output[o * per + i] += bias[o];
  }
  return output;
}

Tensor sum_pool3d(const Tensor& input, const PoolDims& dims, const ConvGeometry& geom) {
  geom.validate();
  if (input.rank() != 3) {
    throw ShapeError("sum_pool3d input must be C x H x W, got " + shape_str(input.shape()));
  }
  const std::size_t channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  if (dims.channels < 1 || dims.height < 1 || dims.width < 1) {
    throw ShapeError("pool window extents must be positive");
  }
  if (dims.channels > channels) {
    throw ShapeError("pooling window of " + std::to_string(dims.channels) +
                     " channels exceeds input with " + std::to_string(channels));
  }
  const std::size_t oc = channels - dims.channels + 1;
  const std::size_t oh = conv_output_extent(height, dims.height, geom.stride[0], geom.padding[0], geom.dilation[0]);
  const std::size_t ow = conv_output_extent(width, dims.width, geom.stride[1], geom.padding[1], geom.dilation[1]);

  // Separable passes: channels, then rows, then columns.
  std::vector<double> chan(oc * height * width, 0.0);
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < oc; ++c) {
    double* dst = chan.data() + c * plane;
    for (std::size_t k = 0; k < dims.channels; ++k) {
      const double* src = input.data().data() + (c + k) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
    }
  }

  std::vector<double> rows(oc * oh * width, 0.0);
  for (std::size_t c = 0; c < oc; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      double* dst = rows.data() + (c * oh + i) * width;
      for (std::size_t u = 0; u < dims.height; ++u) {
        const auto r = static_cast<std::ptrdiff_t>(i) * geom.stride[0] - geom.padding[0] +
                       static_cast<std::ptrdiff_t>(u) * geom.dilation[0];
        if (r < 0 || r >= static_cast<std::ptrdiff_t>(height)) continue;
        const double* src = chan.data() + c * plane + static_cast<std::size_t>(r) * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    }
  }

  Tensor out({oc, oh, ow});
  for (std::size_t c = 0; c < oc; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      const double* src = rows.data() + (c * oh + i) * width;
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t v = 0; v < dims.width; ++v) {
          const auto col = static_cast<std::ptrdiff_t>(j) * geom.stride[1] - geom.padding[1] +
                           static_cast<std::ptrdiff_t>(v) * geom.dilation[1];
          if (col < 0 || col >= static_cast<std::ptrdiff_t>(width)) continue;
          acc += src[col];
        }
        out.at(c, i, j) = acc;
      }
    }
  }
  return out;
}

Tensor linear(const Tensor& weights, const Tensor& x) {
  if (weights.rank() != 2) throw ShapeError("linear weights must be P x Q");
  const std::size_t p = weights.dim(0), q = weights.dim(1);
  if (x.size() != q) {
    throw ShapeError("linear: weights " + shape_str(weights.shape()) + " vs input of length " +
                     std::to_string(x.size()));
  }
  Tensor y({p});
  for (std::size_t i = 0; i < p; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < q; ++j) acc += weights[i * q + j] * x[j];
    y[i] = acc;
  }
  return y;
}

}  // namespace structconv
