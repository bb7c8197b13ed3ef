#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace structconv {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Kernels and feature maps keep the
/// channel axis outermost: C x H x W for maps, C_out x C x N x N for kernels.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);
  Tensor(std::initializer_list<std::size_t> shape);

  static Tensor full(Shape shape, double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  double& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  /// Same data viewed under a new shape with the same element count.
  Tensor reshaped(Shape shape) const;

  /// Contiguous slice along axis 0, e.g. one output-channel kernel.
  Tensor slice0(std::size_t index) const;

  double frobenius_norm() const;
  double max_abs() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Stacks equally-shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);

/// Elementwise a*x + b*y.
Tensor axpby(double a, const Tensor& x, double b, const Tensor& y);

/// max |a - b| / max(max |b|, tiny). Shapes must match.
double max_relative_error(const Tensor& a, const Tensor& b);

/// Stride, zero padding and dilation per spatial axis (index 0 = height,
/// 1 = width), plus channel groups.
struct ConvGeometry {
  std::array<int, 2> stride{1, 1};
  std::array<int, 2> padding{0, 0};
  std::array<int, 2> dilation{1, 1};
  int groups = 1;

  static ConvGeometry uniform(int stride, int padding, int dilation, int groups = 1) {
    return ConvGeometry{{stride, stride}, {padding, padding}, {dilation, dilation}, groups};
  }

  void validate() const;
  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// floor((in + 2p - d(k-1) - 1)/s) + 1; throws ShapeError if that is < 1.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, int stride, int padding,
                               int dilation);

/// Cross-correlation of a C x H x W input with a C_out x (C/g) x kh x kw kernel.
/// Out-of-range input reads are zero.
Tensor conv(const Tensor& input, const Tensor& kernel, const ConvGeometry& geom);

/// Adds bias[o] to every element of output channel o.
Tensor add_channel_bias(Tensor output, const Tensor& bias);

struct PoolDims {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  friend bool operator==(const PoolDims&, const PoolDims&) = default;
};

/// Sliding-window sum over (channel, row, column). The channel axis always
/// slides with stride 1 and no padding; spatial axes use geom's stride,
/// padding and dilation. geom.groups is ignored.
Tensor sum_pool3d(const Tensor& input, const PoolDims& dims, const ConvGeometry& geom);

/// Matrix-vector product of a P x Q matrix with a length-Q vector.
Tensor linear(const Tensor& weights, const Tensor& x);

// Random numbers -------------------------------------------------------------

/// SplitMix64 finalizer: the mixing function of Steele, Lea and Flood.
std::uint64_t splitmix64_mix(std::uint64_t z) noexcept;

/// Counter-based generator. Draw i of stream `seed` is
/// splitmix64_mix(seed + (i + 1) * 0x9E3779B97F4A7C15), so any element can be
/// computed independently of the others.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit CounterRng(std::uint64_t seed, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64() noexcept { return splitmix64_mix(seed_ + (++counter_) * kGamma); }
  /// Uniform on [0, 1) with 53 random bits.
  double next_unit() noexcept;
  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * next_unit(); }
  /// Uniform integer on [0, bound).
  std::uint64_t below(std::uint64_t bound) noexcept;

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

/// Tensor whose element i is 2 * u_i - 1 where u_i is draw i of CounterRng(seed),
/// i.e. uniform on [-1, 1).
Tensor random_tensor(std::uint64_t seed, const Shape& shape);

// Container files ------------------------------------------------------------

/// "STCV" magic, u32 version 1, u32 rank, rank x u32 extents, then binary64
/// payload; all little-endian.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

}  // namespace structconv
