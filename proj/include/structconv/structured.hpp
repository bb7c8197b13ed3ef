#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "structconv/composite.hpp"
#include "structconv/tensor.hpp"

namespace structconv {

/// Residual below which a kernel counts as exactly structured.
inline constexpr double kExactResidualTolerance = 1e-6;

/// Dimensions of a structured kernel: the full kernel is
/// channels x kernel_size x kernel_size, and it is spanned by
/// alpha_channels * alpha_size^2 shifted cuboids of ones of extent
/// (channels - alpha_channels + 1) x (kernel_size - alpha_size + 1)^2.
struct StructuredConfig {
  std::size_t channels = 1;        // C
  std::size_t kernel_size = 1;     // N
  std::size_t alpha_channels = 1;  // c
  std::size_t alpha_size = 1;      // n

  /// Throws ConstraintError unless 1 <= c <= C and 1 <= n <= N.
  void validate() const;

  std::size_t kernel_numel() const { return channels * kernel_size * kernel_size; }
  std::size_t basis_count() const { return alpha_channels * alpha_size * alpha_size; }
  Shape kernel_shape() const { return {channels, kernel_size, kernel_size}; }
  Shape alpha_shape() const { return {alpha_channels, alpha_size, alpha_size}; }
  PoolDims pool_dims() const {
    return {channels - alpha_channels + 1, kernel_size - alpha_size + 1,
            kernel_size - alpha_size + 1};
  }
  /// CN^2 / cn^2.
  double compression_ratio() const {
    return static_cast<double>(kernel_numel()) / static_cast<double>(basis_count());
  }

  friend bool operator==(const StructuredConfig&, const StructuredConfig&) = default;
};

std::string to_string(const StructuredConfig& cfg);

/// The cn^2 basis cuboids, ordered lexicographically by their (channel, row,
/// column) offset.
CompositeBasis generate_structured_basis(const StructuredConfig& cfg);

/// A (CN^2 x cn^2) whose columns are the vectorized basis cuboids, together
/// with its Moore-Penrose inverse and the orthogonal projector AA+.
/// Vectorization is channel-major, then row, then column for both kernels and
/// coefficients. Immutable after construction.
class StructureMatrix {
 public:
  explicit StructureMatrix(const StructuredConfig& cfg);

  const StructuredConfig& config() const noexcept { return cfg_; }
  const Eigen::MatrixXd& matrix() const noexcept { return a_; }
  const Eigen::MatrixXd& pseudo_inverse() const noexcept { return pinv_; }
  const Eigen::MatrixXd& projector() const noexcept { return projector_; }
  std::size_t rank() const noexcept { return rank_; }

  /// A+ w for one vectorized kernel.
  Eigen::VectorXd coefficients(std::span<const double> kernel) const;
  /// ||(I - AA+) w||^2 for one vectorized kernel.
  double squared_residual(std::span<const double> kernel) const;

 private:
  StructuredConfig cfg_;
  Eigen::MatrixXd a_;
  Eigen::MatrixXd pinv_;
  Eigen::MatrixXd projector_;
  std::size_t rank_ = 0;
};

/// Shared, lazily built StructureMatrix for cfg. Safe to call concurrently.
std::shared_ptr<const StructureMatrix> structure_matrix(const StructuredConfig& cfg);

/// Number of cfg-sized kernels packed in `weights`. Accepts a single kernel
/// (C x N x N), a conv layer (C_out x C x N x N) or, when N = 1, a matrix whose
/// rows are kernels (P x C).
std::size_t kernel_count(const Tensor& weights, const StructuredConfig& cfg);

struct Projection {
  Tensor projected;
  double residual = 0.0;  // ||(I - AA+)W|| / ||W||, 0 for a zero tensor
};

/// Orthogonal projection of every kernel in `weights` onto the structured
/// subspace; the residual is taken over the whole tensor.
Projection project(const Tensor& weights, const StructuredConfig& cfg);

/// Normalized distance ||(I - AA+)W||_F / ||W||_F of `weights` (any layout
/// accepted by kernel_count) from the structured subspace. Zero for W = 0.
double structure_residual(const Tensor& weights, const StructuredConfig& cfg);

/// alpha = A+ vec(W) for a single C x N x N kernel, shaped c x n x n.
Tensor extract_alpha(const Tensor& kernel, const StructuredConfig& cfg);

/// Full zero-padded convolution of the all-ones cuboid with alpha (c x n x n),
/// giving the C x N x N kernel.
Tensor reconstruct(const Tensor& alpha, const StructuredConfig& cfg);

/// Sum-pooling followed by a small convolution with the stacked alpha kernels.
struct DecomposedConvLayer {
  StructuredConfig config;
  PoolDims pool_dims;
  ConvGeometry pool_geom;   // stride 1, original padding and dilation
  Tensor alpha;             // C_out x c x n x n
  ConvGeometry small_geom;  // original stride, no padding, original dilation and groups
  std::optional<Tensor> bias;
  ConvGeometry source_geom;  // geometry of the layer this replaced
  std::vector<double> residuals;  // per output channel, at decomposition time

  std::size_t out_channels() const { return alpha.dim(0); }
};

/// Splits a C_out x C x N x N conv layer (C = channels per group) into one
/// shared sum-pool plus a C_out x c x n x n convolution. Throws ResidualError
/// naming the worst output channel if any kernel's residual exceeds
/// `max_residual`. The bias is carried over unchanged.
DecomposedConvLayer decompose_conv_layer(const Tensor& weights, const StructuredConfig& cfg,
                                         const ConvGeometry& geom,
                                         double max_residual = kExactResidualTolerance,
                                         std::optional<Tensor> bias = std::nullopt);

Tensor forward_decomposed(const Tensor& input, const DecomposedConvLayer& layer);

/// Fully-connected layer y = W x with R-structured rows, rewritten as a
/// length-(Q - R + 1) channel sum-pool followed by a P x R matrix.
struct DecomposedLinearLayer {
  std::size_t in_features = 1;   // Q
  std::size_t reduced = 1;       // R
  Tensor small;                  // P x R
  std::optional<Tensor> bias;
  std::vector<double> residuals;  // per row

  std::size_t out_features() const { return small.dim(0); }
  std::size_t pool_window() const { return in_features - reduced + 1; }
};

DecomposedLinearLayer decompose_linear(const Tensor& weights, std::size_t reduced,
                                       double max_residual = kExactResidualTolerance,
                                       std::optional<Tensor> bias = std::nullopt);

/// pool(x)_r = sum_{q=r}^{r+Q-R} x_q.
Tensor channel_pool(const Tensor& x, std::size_t reduced);

Tensor forward_linear(const Tensor& x, const DecomposedLinearLayer& layer);

/// Row-wise reconstruction of a P x Q matrix from P x R coefficients.
Tensor reconstruct_linear(const Tensor& small, std::size_t in_features);

// Serialization: <stem>.alpha.stcv, optional <stem>.bias.stcv and a <stem>.json
// sidecar describing pool/small geometry and the structure config.

using DecomposedLayer = std::variant<DecomposedConvLayer, DecomposedLinearLayer>;

/// Sidecar JSON text for a layer (deterministic key order).
std::string decomposed_sidecar(const DecomposedLayer& layer, const std::string& stem);
void save_decomposed(const std::filesystem::path& dir, const std::string& stem,
                     const DecomposedLayer& layer);
DecomposedLayer load_decomposed(const std::filesystem::path& dir, const std::string& stem);

}  // namespace structconv
