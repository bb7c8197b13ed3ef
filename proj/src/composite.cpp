#include "structconv/composite.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include "structconv/error.hpp"

namespace structconv {

CompositeBasis::CompositeBasis(std::size_t channels, std::size_t size, std::vector<Tensor> elements)
    : channels_(channels), size_(size), elements_(std::move(elements)) {
  if (channels_ == 0 || size_ == 0) throw ShapeError("basis dimensions must be positive");
  if (elements_.empty()) throw ShapeError("composite basis must not be empty");
  const Shape expected{channels_, size_, size_};
  supports_.reserve(elements_.size());
  for (std::size_t m = 0; m < elements_.size(); ++m) {
    const auto& e = elements_[m];
    if (e.shape() != expected) {
      throw ShapeError("basis element " + std::to_string(m) + " has shape " + shape_str(e.shape()) +
                       ", expected " + shape_str(expected));
    }
    std::vector<Tap> taps;
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t i = 0; i < size_; ++i) {
        for (std::size_t j = 0; j < size_; ++j) {
          const double v = e.at(c, i, j);
          if (v != 0.0 && v != 1.0) {
            throw ShapeError("basis element " + std::to_string(m) + " is not binary");
          }
          if (v == 1.0) taps.push_back({c, i, j});
        }
      }
    }
    if (taps.empty()) throw ShapeError("basis element " + std::to_string(m) + " is all zeros");
    supports_.push_back(std::move(taps));
  }
}

CompositeBasis CompositeBasis::one_hot(std::size_t channels, std::size_t size) {
  std::vector<Tensor> elements;
  const std::size_t total = channels * size * size;
  elements.reserve(total);
  for (std::size_t k = 0; k < total; ++k) {
    Tensor e({channels, size, size});
    e[k] = 1.0;
    elements.push_back(std::move(e));
  }
  return CompositeBasis(channels, size, std::move(elements));
}

CompositeBasis CompositeBasis::from_stacked(const Tensor& stacked) {
  if (stacked.rank() != 4 || stacked.dim(2) != stacked.dim(3)) {
    throw ShapeError("stacked basis must be M x C x N x N, got " + shape_str(stacked.shape()));
  }
  std::vector<Tensor> elements;
  for (std::size_t m = 0; m < stacked.dim(0); ++m) elements.push_back(stacked.slice0(m));
  return CompositeBasis(stacked.dim(1), stacked.dim(2), std::move(elements));
}

Tensor CompositeBasis::stacked() const { return stack(elements_); }

namespace {

__extension__ typedef unsigned __int128 u128;

// Rank over GF(p), p = 2^61 - 1. Never exceeds the rational rank.
std::size_t rank_mod_p(std::vector<std::vector<std::uint64_t>> rows, std::size_t cols) {
  constexpr std::uint64_t p = (1ULL << 61) - 1;
  auto mul = [](std::uint64_t a, std::uint64_t b) {
    return static_cast<std::uint64_t>((static_cast<u128>(a) * b) % p);
  };
  auto inv = [&](std::uint64_t a) {
    std::uint64_t result = 1, e = p - 2;
    while (e) {
      if (e & 1) result = mul(result, a);
      a = mul(a, a);
      e >>= 1;
    }
    return result;
  };
  std::size_t rank = 0;
  for (std::size_t col = 0; col < cols && rank < rows.size(); ++col) {
    std::size_t pivot = rank;
    while (pivot < rows.size() && rows[pivot][col] == 0) ++pivot;
    if (pivot == rows.size()) continue;
    std::swap(rows[pivot], rows[rank]);
    const std::uint64_t scale = inv(rows[rank][col]);
    for (std::size_t r = rank + 1; r < rows.size(); ++r) {
      if (rows[r][col] == 0) continue;
      const std::uint64_t f = mul(rows[r][col], scale);
      for (std::size_t k = col; k < cols; ++k) {
        rows[r][k] = (rows[r][k] + p - mul(f, rows[rank][k])) % p;
      }
    }
    ++rank;
  }
  return rank;
}

// Fraction-free (Bareiss) elimination over arbitrary-precision integers.
std::size_t rank_bareiss(const std::vector<std::vector<std::uint64_t>>& input, std::size_t cols) {
  using boost::multiprecision::cpp_int;
  std::vector<std::vector<cpp_int>> a(input.size(), std::vector<cpp_int>(cols));
  for (std::size_t r = 0; r < input.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) a[r][c] = input[r][c];
  }
  cpp_int prev = 1;
  std::size_t rank = 0;
  for (std::size_t col = 0; col < cols && rank < a.size(); ++col) {
    std::size_t pivot = rank;
    while (pivot < a.size() && a[pivot][col] == 0) ++pivot;
    if (pivot == a.size()) continue;
    std::swap(a[pivot], a[rank]);
    for (std::size_t r = rank + 1; r < a.size(); ++r) {
      for (std::size_t k = col + 1; k < cols; ++k) {
        a[r][k] = (a[rank][col] * a[r][k] - a[r][col] * a[rank][k]) / prev;
      }
      a[r][col] = 0;
    }
    prev = a[rank][col];
    ++rank;
  }
  return rank;
}

}  // namespace

std::size_t check_linear_independence(const CompositeBasis& basis) {
  const std::size_t cols = basis.channels() * basis.size() * basis.size();
  std::vector<std::vector<std::uint64_t>> rows;
  rows.reserve(basis.count());
  for (const auto& e : basis.elements()) {
    std::vector<std::uint64_t> row(cols);
    for (std::size_t k = 0; k < cols; ++k) row[k] = e[k] != 0.0 ? 1 : 0;
    rows.push_back(std::move(row));
  }
  // Full rank modulo a prime implies full rank over the rationals; only a
  // deficient result needs the exact (slower) confirmation.
  const std::size_t fast = rank_mod_p(rows, cols);
  if (fast == rows.size()) return fast;
  return rank_bareiss(rows, cols);
}

Tensor compose_kernel(const CompositeKernel& kernel) {
  const auto& basis = kernel.basis;
  if (kernel.alphas.size() != basis.count()) {
    throw ShapeError("expected " + std::to_string(basis.count()) + " coefficients, got " +
                     std::to_string(kernel.alphas.size()));
  }
  Tensor out({basis.channels(), basis.size(), basis.size()});
  for (std::size_t m = 0; m < basis.count(); ++m) {
    for (const auto& t : basis.supports()[m]) out.at(t.channel, t.row, t.col) += kernel.alphas[m];
  }
  return out;
}

Tensor conv_composite(const Tensor& input, const CompositeKernel& kernel, const ConvGeometry& geom) {
  geom.validate();
  const auto& basis = kernel.basis;
  if (kernel.alphas.size() != basis.count()) throw ShapeError("coefficient count mismatch");
  if (input.rank() != 3 || input.dim(0) != basis.channels()) {
    throw ShapeError("conv_composite: input " + shape_str(input.shape()) + " vs basis with " +
                     std::to_string(basis.channels()) + " channels");
  }
  if (geom.groups != 1) throw ShapeError("conv_composite does not support grouped convolution");
  const std::size_t height = input.dim(1), width = input.dim(2), n = basis.size();
  const std::size_t oh = conv_output_extent(height, n, geom.stride[0], geom.padding[0], geom.dilation[0]);
  const std::size_t ow = conv_output_extent(width, n, geom.stride[1], geom.padding[1], geom.dilation[1]);

  Tensor out({1, oh, ow});
  const std::span<const double> alphas(kernel.alphas);
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      auto read = [&](const Tap& t) {
        const auto r = static_cast<std::ptrdiff_t>(i) * geom.stride[0] - geom.padding[0] +
                       static_cast<std::ptrdiff_t>(t.row) * geom.dilation[0];
        const auto c = static_cast<std::ptrdiff_t>(j) * geom.stride[1] - geom.padding[1] +
                       static_cast<std::ptrdiff_t>(t.col) * geom.dilation[1];
        if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(height) ||
            c >= static_cast<std::ptrdiff_t>(width)) {
          return 0.0;
        }
        return input.at(t.channel, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      };
      out.at(0, i, j) = evaluate_composite_point<double>(basis.supports(), alphas, read);
    }
  }
  return out;
}

CompositeOpCount count_composite_ops(const CompositeBasis& basis) {
  std::uint64_t ones = 0;
  for (const auto& s : basis.supports()) ones += s.size();
  return {basis.count(), ones - 1};
}

}  // namespace structconv
