#pragma once

#include <cstdint>

namespace structconv {

struct OpCounts {
  std::uint64_t mults = 0;
  std::uint64_t adds = 0;
  friend bool operator==(const OpCounts&, const OpCounts&) = default;
};

/// Scalar that tallies every + and * into the active OpCounts of the calling
/// thread. Use CountingScope to install a tally.
class CountedScalar {
 public:
  CountedScalar() = default;
  CountedScalar(double v) : value_(v) {}  // NOLINT(google-explicit-constructor)

  double value() const noexcept { return value_; }

  friend CountedScalar operator+(CountedScalar a, CountedScalar b) {
    if (active_) ++active_->adds;
    return CountedScalar(a.value_ + b.value_);
  }
  friend CountedScalar operator*(CountedScalar a, CountedScalar b) {
    if (active_) ++active_->mults;
    return CountedScalar(a.value_ * b.value_);
  }

 private:
  friend class CountingScope;
  double value_ = 0.0;
  static inline thread_local OpCounts* active_ = nullptr;
};

class CountingScope {
 public:
  explicit CountingScope(OpCounts& sink) : previous_(CountedScalar::active_) {
    CountedScalar::active_ = &sink;
  }
  ~CountingScope() { CountedScalar::active_ = previous_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  OpCounts* previous_;
};

}  // namespace structconv
