#include "structconv/structured.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

#include "structconv/error.hpp"

namespace structconv {

void StructuredConfig::validate() const {
  if (channels < 1 || kernel_size < 1) {
    throw ConstraintError("constraint violation: kernel dimensions must be positive (" +
                          to_string(*this) + ")");
  }
  if (alpha_channels < 1 || alpha_channels > channels) {
    throw ConstraintError("constraint violation: need 1 <= c <= C (" + to_string(*this) + ")");
  }
  if (alpha_size < 1 || alpha_size > kernel_size) {
    throw ConstraintError("constraint violation: need 1 <= n <= N (" + to_string(*this) + ")");
  }
}

std::string to_string(const StructuredConfig& cfg) {
  return "C=" + std::to_string(cfg.channels) + " N=" + std::to_string(cfg.kernel_size) +
         " c=" + std::to_string(cfg.alpha_channels) + " n=" + std::to_string(cfg.alpha_size);
}

CompositeBasis generate_structured_basis(const StructuredConfig& cfg) {
  cfg.validate();
  const auto pool = cfg.pool_dims();
  std::vector<Tensor> elements;
  elements.reserve(cfg.basis_count());
  for (std::size_t i = 0; i < cfg.alpha_channels; ++i) {
    for (std::size_t j = 0; j < cfg.alpha_size; ++j) {
      for (std::size_t k = 0; k < cfg.alpha_size; ++k) {
        Tensor e(cfg.kernel_shape());
        for (std::size_t ch = i; ch < i + pool.channels; ++ch) {
          for (std::size_t r = j; r < j + pool.height; ++r) {
            for (std::size_t col = k; col < k + pool.width; ++col) e.at(ch, r, col) = 1.0;
          }
        }
        elements.push_back(std::move(e));
      }
    }
  }
  return CompositeBasis(cfg.channels, cfg.kernel_size, std::move(elements));
}

namespace {

constexpr double kPinvCheck = 1e-10;

// Pseudoinverse with singular values below 1e-12 * sigma_max treated as zero.
template <class Svd>
Eigen::MatrixXd svd_pseudo_inverse(const Eigen::MatrixXd& a, std::size_t& rank) {
  Svd svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sigma = svd.singularValues();
  const double cutoff = 1e-12 * (sigma.size() ? sigma(0) : 0.0);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(sigma.size());
  rank = 0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > cutoff) {
      inv(i) = 1.0 / sigma(i);
      ++rank;
    }
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

}  // namespace

StructureMatrix::StructureMatrix(const StructuredConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t big_n = cfg.kernel_size, small_n = cfg.alpha_size;
  const auto pool = cfg.pool_dims();
  const auto rows = static_cast<Eigen::Index>(cfg.kernel_numel());
  const auto cols = static_cast<Eigen::Index>(cfg.basis_count());
  a_ = Eigen::MatrixXd::Zero(rows, cols);
  for (std::size_t i = 0; i < cfg.alpha_channels; ++i) {
    for (std::size_t j = 0; j < small_n; ++j) {
      for (std::size_t k = 0; k < small_n; ++k) {
        const auto col_index = static_cast<Eigen::Index>((i * small_n + j) * small_n + k);
        for (std::size_t ch = i; ch < i + pool.channels; ++ch) {
          for (std::size_t r = j; r < j + pool.height; ++r) {
            for (std::size_t c = k; c < k + pool.width; ++c) {
              a_(static_cast<Eigen::Index>((ch * big_n + r) * big_n + c), col_index) = 1.0;
            }
          }
        }
      }
    }
  }

  pinv_ = svd_pseudo_inverse<Eigen::BDCSVD<Eigen::MatrixXd>>(a_, rank_);
  const auto eye = Eigen::MatrixXd::Identity(cols, cols);
  if (rank_ != cfg.basis_count() || !((pinv_ * a_ - eye).cwiseAbs().maxCoeff() <= kPinvCheck)) {
    // BDCSVD can mis-deflate on exactly repeated singular values.
    pinv_ = svd_pseudo_inverse<Eigen::JacobiSVD<Eigen::MatrixXd, Eigen::ColPivHouseholderQRPreconditioner>>(a_, rank_);
  }
  if (rank_ != cfg.basis_count()) {
    throw Error("internal error: structure matrix for " + to_string(cfg) + " has rank " +
                std::to_string(rank_) + " < " + std::to_string(cfg.basis_count()));
  }
  projector_ = a_ * pinv_;
}

Eigen::VectorXd StructureMatrix::coefficients(std::span<const double> kernel) const {
  if (kernel.size() != cfg_.kernel_numel()) throw ShapeError("kernel length mismatch");
  const Eigen::Map<const Eigen::VectorXd> w(kernel.data(), static_cast<Eigen::Index>(kernel.size()));
  return pinv_ * w;
}

double StructureMatrix::squared_residual(std::span<const double> kernel) const {
  if (kernel.size() != cfg_.kernel_numel()) throw ShapeError("kernel length mismatch");
  const Eigen::Map<const Eigen::VectorXd> w(kernel.data(), static_cast<Eigen::Index>(kernel.size()));
  return (w - projector_ * w).squaredNorm();
}

std::shared_ptr<const StructureMatrix> structure_matrix(const StructuredConfig& cfg) {
  using Key = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;
  static std::mutex mutex;
  static std::map<Key, std::shared_ptr<const StructureMatrix>> cache;
  const Key key{cfg.channels, cfg.kernel_size, cfg.alpha_channels, cfg.alpha_size};
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  auto built = std::make_shared<const StructureMatrix>(cfg);
  std::lock_guard lock(mutex);
  return cache.emplace(key, std::move(built)).first->second;
}

std::size_t kernel_count(const Tensor& weights, const StructuredConfig& cfg) {
  const auto& s = weights.shape();
  const std::size_t n = cfg.kernel_size;
  const bool single = s == cfg.kernel_shape();
  const bool layer = s.size() == 4 && s[1] == cfg.channels && s[2] == n && s[3] == n;
  const bool rows = n == 1 && s.size() == 2 && s[1] == cfg.channels;
  if (single) return 1;
  if (layer || rows) return s[0];
  throw ShapeError("weights " + shape_str(s) + " do not match structure " + to_string(cfg));
}

Projection project(const Tensor& weights, const StructuredConfig& cfg) {
  const std::size_t count = kernel_count(weights, cfg);
  const auto sm = structure_matrix(cfg);
  const std::size_t len = cfg.kernel_numel();
  Projection out{Tensor(weights.shape()), 0.0};
  double off = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    const Eigen::Map<const Eigen::VectorXd> w(weights.data().data() + k * len,
                                              static_cast<Eigen::Index>(len));
    Eigen::Map<Eigen::VectorXd> p(out.projected.data().data() + k * len,
                                  static_cast<Eigen::Index>(len));
    p = sm->projector() * w;
    off += (w - p).squaredNorm();
  }
  const double norm = weights.frobenius_norm();
  out.residual = norm > 0.0 ? std::sqrt(off) / norm : 0.0;
  return out;
}

double structure_residual(const Tensor& weights, const StructuredConfig& cfg) {
  const std::size_t count = kernel_count(weights, cfg);
  const auto sm = structure_matrix(cfg);
  const std::size_t len = cfg.kernel_numel();
  double off = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    off += sm->squared_residual(weights.data().subspan(k * len, len));
  }
  const double norm = weights.frobenius_norm();
  return norm > 0.0 ? std::sqrt(off) / norm : 0.0;
}

Tensor extract_alpha(const Tensor& kernel, const StructuredConfig& cfg) {
  cfg.validate();
  if (kernel.shape() != cfg.kernel_shape()) {
    throw ShapeError("extract_alpha: kernel " + shape_str(kernel.shape()) + " does not match " +
                     to_string(cfg));
  }
  const Eigen::VectorXd a = structure_matrix(cfg)->coefficients(kernel.data());
  return Tensor(cfg.alpha_shape(), std::vector<double>(a.data(), a.data() + a.size()));
}

namespace {

// Full 1D convolution with a ones window along one axis of a 3D block:
// out[.., t, ..] = sum_{s = t - window + 1}^{t} in[.., s, ..].
std::vector<double> ones_full_conv(const std::vector<double>& in, std::array<std::size_t, 3> dims,
                                   int axis, std::size_t window) {
  auto out_dims = dims;
  out_dims[static_cast<std::size_t>(axis)] += window - 1;
  std::vector<double> out(out_dims[0] * out_dims[1] * out_dims[2], 0.0);
  for (std::size_t a = 0; a < dims[0]; ++a) {
    for (std::size_t b = 0; b < dims[1]; ++b) {
      for (std::size_t c = 0; c < dims[2]; ++c) {
        const double v = in[(a * dims[1] + b) * dims[2] + c];
        for (std::size_t w = 0; w < window; ++w) {
          std::array<std::size_t, 3> idx{a, b, c};
          idx[static_cast<std::size_t>(axis)] += w;
          out[(idx[0] * out_dims[1] + idx[1]) * out_dims[2] + idx[2]] += v;
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor reconstruct(const Tensor& alpha, const StructuredConfig& cfg) {
  cfg.validate();
  if (alpha.shape() != cfg.alpha_shape()) {
    throw ShapeError("reconstruct: alpha " + shape_str(alpha.shape()) + " does not match " +
                     to_string(cfg));
  }
  const auto pool = cfg.pool_dims();
  std::array<std::size_t, 3> dims{cfg.alpha_channels, cfg.alpha_size, cfg.alpha_size};
  auto data = ones_full_conv(alpha.values(), dims, 0, pool.channels);
  dims[0] = cfg.channels;
  data = ones_full_conv(data, dims, 1, pool.height);
  dims[1] = cfg.kernel_size;
  data = ones_full_conv(data, dims, 2, pool.width);
  return Tensor(cfg.kernel_shape(), std::move(data));
}

namespace {

// alpha = A+ W and per-kernel normalized residuals for `count` contiguous kernels.
void batch_coefficients(const StructureMatrix& sm, std::span<const double> weights, std::size_t count,
                        std::span<double> alpha, std::vector<double>& residuals) {
  const auto len = static_cast<Eigen::Index>(sm.config().kernel_numel());
  const auto alen = static_cast<Eigen::Index>(sm.config().basis_count());
  const auto cols = static_cast<Eigen::Index>(count);
  const Eigen::Map<const Eigen::MatrixXd> w(weights.data(), len, cols);
  Eigen::Map<Eigen::MatrixXd> a(alpha.data(), alen, cols);
  a.noalias() = sm.pseudo_inverse() * w;
  const Eigen::MatrixXd off = w - sm.matrix() * a;
  residuals.resize(count);
  for (Eigen::Index k = 0; k < cols; ++k) {
    const double norm = w.col(k).norm();
    residuals[static_cast<std::size_t>(k)] = norm > 0.0 ? off.col(k).norm() / norm : 0.0;
  }
}

}  // namespace

DecomposedConvLayer decompose_conv_layer(const Tensor& weights, const StructuredConfig& cfg,
                                         const ConvGeometry& geom, double max_residual,
                                         std::optional<Tensor> bias) {
  cfg.validate();
  geom.validate();
  if (weights.rank() != 4 || weights.dim(1) != cfg.channels || weights.dim(2) != cfg.kernel_size ||
      weights.dim(3) != cfg.kernel_size) {
    throw ShapeError("decompose_conv_layer: weights " + shape_str(weights.shape()) +
                     " do not match " + to_string(cfg));
  }
  const std::size_t out_ch = weights.dim(0);
  if (geom.groups > 1 && cfg.alpha_channels != cfg.channels) {
    throw ShapeError("grouped convolution only decomposes spatially (c must equal C)");
  }
  if (out_ch % static_cast<std::size_t>(geom.groups) != 0) {
    throw ShapeError("output channels not divisible by groups");
  }
  if (bias && bias->size() != out_ch) throw ShapeError("bias length does not match C_out");

  const auto sm = structure_matrix(cfg);
  DecomposedConvLayer layer;
  layer.config = cfg;
  layer.pool_dims = cfg.pool_dims();
  layer.pool_geom = ConvGeometry{{1, 1}, geom.padding, geom.dilation, 1};
  layer.small_geom = ConvGeometry{geom.stride, {0, 0}, geom.dilation, geom.groups};
  layer.source_geom = geom;
  layer.alpha = Tensor({out_ch, cfg.alpha_channels, cfg.alpha_size, cfg.alpha_size});
  layer.bias = std::move(bias);
  layer.residuals.resize(out_ch);

  batch_coefficients(*sm, weights.data(), out_ch, layer.alpha.data(), layer.residuals);
  const std::size_t worst = static_cast<std::size_t>(
      std::max_element(layer.residuals.begin(), layer.residuals.end()) - layer.residuals.begin());
  if (layer.residuals[worst] > max_residual) {
    throw ResidualError("residual exceeded: output channel " + std::to_string(worst) +
                            " has residual " + std::to_string(layer.residuals[worst]) +
                            " > tolerance " + std::to_string(max_residual),
                        worst, layer.residuals[worst]);
  }
  return layer;
}

Tensor forward_decomposed(const Tensor& input, const DecomposedConvLayer& layer) {
  if (input.rank() != 3) throw ShapeError("forward_decomposed: input must be C x H x W");
  const auto groups = static_cast<std::size_t>(layer.small_geom.groups);
  if (input.dim(0) != layer.config.channels * groups) {
    throw ShapeError("forward_decomposed: input has " + std::to_string(input.dim(0)) +
                     " channels, layer expects " + std::to_string(layer.config.channels * groups));
  }
  const Tensor pooled = sum_pool3d(input, layer.pool_dims, layer.pool_geom);
  Tensor out = conv(pooled, layer.alpha, layer.small_geom);
  const auto& g = layer.source_geom;
  const std::size_t n = layer.config.kernel_size;
  if (out.dim(1) != conv_output_extent(input.dim(1), n, g.stride[0], g.padding[0], g.dilation[0]) ||
      out.dim(2) != conv_output_extent(input.dim(2), n, g.stride[1], g.padding[1], g.dilation[1])) {
    throw Error("internal error: decomposed output extents differ from the original layer");
  }
  if (layer.bias) out = add_channel_bias(std::move(out), *layer.bias);
  return out;
}

Tensor channel_pool(const Tensor& x, std::size_t reduced) {
  const std::size_t q = x.size();
  if (reduced < 1 || reduced > q) throw ConstraintError("constraint violation: need 1 <= R <= Q");
  const std::size_t window = q - reduced + 1;
  Tensor out({reduced});
  for (std::size_t r = 0; r < reduced; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < window; ++k) acc += x[r + k];
    out[r] = acc;
  }
  return out;
}

DecomposedLinearLayer decompose_linear(const Tensor& weights, std::size_t reduced,
                                       double max_residual, std::optional<Tensor> bias) {
  if (weights.rank() != 2) throw ShapeError("decompose_linear: weights must be P x Q");
  const std::size_t p = weights.dim(0), q = weights.dim(1);
  const StructuredConfig cfg{q, 1, reduced, 1};
  cfg.validate();
  if (bias && bias->size() != p) throw ShapeError("bias length does not match P");
  const auto sm = structure_matrix(cfg);
  DecomposedLinearLayer layer;
  layer.in_features = q;
  layer.reduced = reduced;
  layer.small = Tensor({p, reduced});
  layer.bias = std::move(bias);
  layer.residuals.resize(p);
  batch_coefficients(*sm, weights.data(), p, layer.small.data(), layer.residuals);
  const std::size_t worst = static_cast<std::size_t>(
      std::max_element(layer.residuals.begin(), layer.residuals.end()) - layer.residuals.begin());
  if (layer.residuals[worst] > max_residual) {
    throw ResidualError("residual exceeded: row " + std::to_string(worst) + " has residual " +
                            std::to_string(layer.residuals[worst]) + " > tolerance " +
                            std::to_string(max_residual),
                        worst, layer.residuals[worst]);
  }
  return layer;
}

Tensor forward_linear(const Tensor& x, const DecomposedLinearLayer& layer) {
  if (x.size() != layer.in_features) {
    throw ShapeError("forward_linear: input length " + std::to_string(x.size()) + " != Q = " +
                     std::to_string(layer.in_features));
  }
  Tensor y = linear(layer.small, channel_pool(x, layer.reduced));
  if (layer.bias) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += (*layer.bias)[i];
  }
  return y;
}

Tensor reconstruct_linear(const Tensor& small, std::size_t in_features) {
  if (small.rank() != 2) throw ShapeError("reconstruct_linear: coefficients must be P x R");
  const std::size_t p = small.dim(0), r = small.dim(1);
  const StructuredConfig cfg{in_features, 1, r, 1};
  Tensor out({p, in_features});
  for (std::size_t i = 0; i < p; ++i) {
    const Tensor row = reconstruct(small.slice0(i).reshaped({r, 1, 1}), cfg);
    std::copy(row.values().begin(), row.values().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * in_features));
  }
  return out;
}

}  // namespace structconv
