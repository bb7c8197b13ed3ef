#include <bit>

#include "structconv/tensor.hpp"

namespace structconv {

std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double CounterRng::next_unit() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

namespace {
__extension__ typedef unsigned __int128 u128;
}  // namespace

std::uint64_t CounterRng::below(std::uint64_t bound) noexcept {
  // Lemire's multiply-shift; the bias is < bound / 2^64 and irrelevant here.
  return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * bound) >> 64);
}

Tensor random_tensor(std::uint64_t seed, const Shape& shape) {
  Tensor t(shape);
  CounterRng rng(seed);
  for (auto& v : t.data()) v = 2.0 * rng.next_unit() - 1.0;
  return t;
}

}  // namespace structconv
