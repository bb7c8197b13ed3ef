#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "structconv/tensor.hpp"

namespace structconv {

/// Position of a single 1 inside a C x N x N basis element.
struct Tap {
  std::size_t channel;
  std::size_t row;
  std::size_t col;
};

/// Ordered set of binary C x N x N tensors. Entries are checked to be 0/1 on
/// construction; linear independence is a separate (more expensive) query.
class CompositeBasis {
 public:
  CompositeBasis(std::size_t channels, std::size_t size, std::vector<Tensor> elements);

  /// The CN^2 one-hot tensors, i.e. an unconstrained kernel.
  static CompositeBasis one_hot(std::size_t channels, std::size_t size);
  /// Inverse of stacked(): an M x C x N x N tensor of 0/1 values.
  static CompositeBasis from_stacked(const Tensor& stacked);

  std::size_t channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return size_; }
  std::size_t count() const noexcept { return elements_.size(); }

  const Tensor& element(std::size_t m) const { return elements_.at(m); }
  const std::vector<Tensor>& elements() const noexcept { return elements_; }
  std::span<const std::vector<Tap>> supports() const noexcept { return supports_; }

  Tensor stacked() const;

 private:
  std::size_t channels_;
  std::size_t size_;
  std::vector<Tensor> elements_;
  std::vector<std::vector<Tap>> supports_;
};

struct CompositeKernel {
  CompositeBasis basis;
  std::vector<double> alphas;
};

/// Rank of the M x CN^2 matrix whose rows are the vectorized elements.
/// The basis is linearly independent iff the result equals count().
std::size_t check_linear_independence(const CompositeBasis& basis);

/// sum_m alpha_m * beta_m.
Tensor compose_kernel(const CompositeKernel& kernel);

/// Convolution evaluated as sum_m alpha_m * E_m where E_m adds the inputs under
/// beta_m's support. Returns a 1 x H' x W' map, matching
/// conv(X, compose_kernel(k) as a 1 x C x N x N kernel, geom).
Tensor conv_composite(const Tensor& input, const CompositeKernel& kernel, const ConvGeometry& geom);

struct CompositeOpCount {
  std::uint64_t mults_per_output;
  std::uint64_t adds_per_output;
};

CompositeOpCount count_composite_ops(const CompositeBasis& basis);

/// One output element of the composite path. `read(tap)` returns the input
/// value aligned with `tap` (zero when it falls in the padding). E_m sums are
/// formed first, then combined in ascending m.
template <class T, class Read>
T evaluate_composite_point(std::span<const std::vector<Tap>> supports, std::span<const T> alphas,
                           Read&& read) {
  T out{};
  for (std::size_t m = 0; m < supports.size(); ++m) {
    const auto& taps = supports[m];
    T e = read(taps.front());
    for (std::size_t t = 1; t < taps.size(); ++t) e = e + read(taps[t]);
    const T term = alphas[m] * e;
    out = m == 0 ? term : out + term;
  }
  return out;
}

}  // namespace structconv
