#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "structconv/error.hpp"
#include "structconv/tensor.hpp"

using namespace structconv;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "structconv_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.max_abs() == 0.0);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK(Tensor::full({2, 2}, 3.0).frobenius_norm() == doctest::Approx(6.0));
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("identity 1x1 kernel returns the input") {
  const Tensor x = random_tensor(5, {1, 4, 4});
  const Tensor k({1, 1, 1, 1}, {1.0});
  CHECK(conv(x, k, ConvGeometry{}) == x);
}

TEST_CASE("all-ones window sums") {
  const Tensor y = conv(Tensor::full({1, 3, 3}, 1.0), Tensor::full({1, 1, 2, 2}, 1.0), ConvGeometry{});
  CHECK(y.shape() == Shape{1, 2, 2});
  for (double v : y.values()) CHECK(v == 4.0);
}

TEST_CASE("conv matches the nested-loop evaluator") {
  SUBCASE("stride 2, padding 1") {
    const Tensor x = random_tensor(11, {2, 5, 5});
    const Tensor k = random_tensor(12, {3, 2, 3, 3});
    const auto g = ConvGeometry::uniform(2, 1, 1);
    CHECK(max_relative_error(conv(x, k, g), oracle::conv(x, k, g)) <= 1e-14);
  }
  SUBCASE("geometry sweep with groups and asymmetric settings") {
    std::uint64_t seed = 100;
    for (int s : {1, 2, 3}) {
      for (int p : {0, 1, 2}) {
        for (int d : {1, 2}) {
          for (int g : {1, 2}) {
            const Tensor x = random_tensor(seed++, {4, 7, 6});
            const Tensor k = random_tensor(seed++, {4, static_cast<std::size_t>(4 / g), 3, 2});
            const ConvGeometry geom{{s, 1}, {p, 0}, {d, 1}, g};
            CHECK(max_relative_error(conv(x, k, geom), oracle::conv(x, k, geom)) <= 1e-14);
          }
        }
      }
    }
  }
}

TEST_CASE("conv rejects bad shapes and empty outputs") {
  const Tensor x = random_tensor(1, {2, 3, 3});
  CHECK_THROWS_AS(conv(x, random_tensor(2, {1, 3, 2, 2}), ConvGeometry{}), ShapeError);
  CHECK_THROWS_AS(conv(x, random_tensor(2, {1, 2, 5, 5}), ConvGeometry{}), ShapeError);
  CHECK_THROWS_AS(conv(x, random_tensor(2, {3, 1, 2, 2}), ConvGeometry::uniform(1, 0, 1, 2)), ShapeError);
  CHECK_THROWS_AS(conv_output_extent(3, 3, 1, 0, 2), ShapeError);
  CHECK(conv_output_extent(224, 3, 2, 1, 1) == 112);
}

TEST_CASE("conv is linear in the kernel") {
  const Tensor x = random_tensor(21, {3, 6, 6});
  const Tensor k1 = random_tensor(22, {2, 3, 3, 3});
  const Tensor k2 = random_tensor(23, {2, 3, 3, 3});
  const auto g = ConvGeometry::uniform(1, 1, 2);
  const Tensor lhs = conv(x, axpby(0.7, k1, -1.3, k2), g);
  const Tensor rhs = axpby(0.7, conv(x, k1, g), -1.3, conv(x, k2, g));
  CHECK(max_relative_error(lhs, rhs) <= 1e-12);
}

TEST_CASE("sum_pool3d") {
  SUBCASE("constant input") {
    const Tensor y = sum_pool3d(Tensor::full({4, 3, 3}, 1.0), {3, 2, 2}, ConvGeometry{});
    CHECK(y.shape() == Shape{2, 2, 2});
    for (double v : y.values()) CHECK(v == 12.0);
  }
  SUBCASE("matches the all-ones convolution") {
    const Tensor x = random_tensor(31, {4, 6, 6});
    const auto g = ConvGeometry::uniform(1, 1, 1);
    const Tensor y = sum_pool3d(x, {3, 2, 2}, g);
    CHECK(y.shape() == Shape{2, 7, 7});
    CHECK(max_relative_error(y, oracle::sum_pool(x, {3, 2, 2}, g)) <= 1e-12);
  }
  SUBCASE("padding and dilation sweep") {
    std::uint64_t seed = 40;
    for (int p : {0, 1, 2}) {
      for (int d : {1, 2}) {
        const Tensor x = random_tensor(seed++, {3, 7, 7});
        const auto g = ConvGeometry::uniform(1, p, d);
        CHECK(max_relative_error(sum_pool3d(x, {2, 3, 2}, g), oracle::sum_pool(x, {2, 3, 2}, g)) <= 1e-12);
      }
    }
  }
  SUBCASE("unit window is the identity") {
    const Tensor x = random_tensor(32, {3, 4, 5});
    CHECK(sum_pool3d(x, {1, 1, 1}, ConvGeometry{}) == x);
  }
  SUBCASE("window larger than the input") {
    CHECK_THROWS_AS(sum_pool3d(random_tensor(1, {2, 3, 3}), {3, 1, 1}, ConvGeometry{}), ShapeError);
    CHECK_THROWS_AS(sum_pool3d(random_tensor(1, {2, 3, 3}), {1, 4, 1}, ConvGeometry{}), ShapeError);
  }
}

TEST_CASE("sum-pool then small conv has the extents of the full conv") {
  for (std::size_t N : {1u, 3u, 5u}) {
    for (std::size_t n = 1; n <= N; ++n) {
      for (int s : {1, 2}) {
        for (int p : {0, 1, 2}) {
          for (int d : {1, 2}) {
            const std::size_t H = 11;
            if (H + 2 * static_cast<std::size_t>(p) < static_cast<std::size_t>(d) * (N - 1) + 1) continue;
            const std::size_t full = conv_output_extent(H, N, s, p, d);
            const std::size_t pooled = conv_output_extent(H, N - n + 1, 1, p, d);
            CHECK(pooled == H + 2 * static_cast<std::size_t>(p) - static_cast<std::size_t>(d) * (N - n));
            CHECK(conv_output_extent(pooled, n, s, 0, d) == full);
          }
        }
      }
    }
  }
}

TEST_CASE("linear") {
  const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor x({3}, {0.5, -2.0, 7.0});
  CHECK(linear(eye, x) == x);
  CHECK(linear(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, {1, 1})) == Tensor({2}, {3, 7}));
  const Tensor w = random_tensor(51, {8, 16});
  const Tensor v = random_tensor(52, {16});
  const Tensor via_conv = conv(v.reshaped({16, 1, 1}), w.reshaped({8, 16, 1, 1}), ConvGeometry{});
  CHECK(max_relative_error(linear(w, v), via_conv.reshaped({8})) <= 1e-14);
  CHECK_THROWS_AS(linear(w, random_tensor(1, {15})), ShapeError);
}

TEST_CASE("counter-based generator") {
  // Published SplitMix64 outputs for seed 0.
  CounterRng rng(0);
  CHECK(rng.next_u64() == 0xE220A8397B1DCDAFULL);
  CHECK(rng.next_u64() == 0x6E789E6AA1B965F4ULL);
  CHECK(rng.next_u64() == 0x06C45D188009454FULL);

  const Tensor t = random_tensor(0, {2, 2});
  CHECK(t[0] == 2.0 * static_cast<double>(0xE220A8397B1DCDAFULL >> 11) * 0x1.0p-53 - 1.0);
  CHECK(t[1] == 2.0 * static_cast<double>(0x6E789E6AA1B965F4ULL >> 11) * 0x1.0p-53 - 1.0);
  for (double v : t.values()) CHECK((v >= -1.0 && v < 1.0));

  CHECK(random_tensor(9, {3, 4}) == random_tensor(9, {3, 4}));
  CHECK(random_tensor(9, {3, 4}) != random_tensor(10, {3, 4}));

  CounterRng a(77), b(77, 5);
  for (int i = 0; i < 5; ++i) a.next_u64();
  CHECK(a.next_u64() == b.next_u64());

  CounterRng c(3);
  for (int i = 0; i < 1000; ++i) CHECK(c.below(7) < 7);
}

TEST_CASE("tensor container round trip") {
  const Tensor t = random_tensor(61, {2, 3, 4});
  const auto path = scratch("round_trip.stcv");
  write_tensor(path, t);
  const Tensor back = read_tensor(path);
  CHECK(back.shape() == t.shape());
  CHECK(std::memcmp(back.data().data(), t.data().data(), t.size() * sizeof(double)) == 0);

  const auto bytes = encode_tensor(Tensor({1}, {-0.0}));
  CHECK(bytes.size() == 4 + 4 + 4 + 4 + 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "STCV");
  CHECK(bytes[4] == 1);
  CHECK(std::signbit(decode_tensor(bytes)[0]));
}

TEST_CASE("tensor container errors") {
  std::vector<std::uint8_t> good{'S', 'T', 'C', 'V'};
  put_u32(good, 1);
  put_u32(good, 2);
  put_u32(good, 2);
  put_u32(good, 3);

  SUBCASE("bad magic") {
    auto bytes = good;
    bytes[0] = 'X';
    const auto path = scratch("bad_magic.stcv");
    write_bytes(path, bytes);
    CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("bad magic"), FormatError);
  }
  SUBCASE("truncated payload") {
    auto bytes = good;
    bytes.resize(bytes.size() + 5 * 8, 0);
    CHECK_THROWS_WITH_AS(decode_tensor(bytes), doctest::Contains("truncated payload"), FormatError);
  }
  SUBCASE("trailing bytes") {
    auto bytes = good;
    bytes.resize(bytes.size() + 6 * 8 + 1, 0);
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
  }
  SUBCASE("extent overflow") {
    std::vector<std::uint8_t> bytes{'S', 'T', 'C', 'V'};
    put_u32(bytes, 1);
    put_u32(bytes, 4);
    for (int i = 0; i < 4; ++i) put_u32(bytes, 0xFFFFFFFFu);
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
  }
  SUBCASE("zero extent and version") {
    auto bytes = good;
    bytes[12] = 0;
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
    bytes = good;
    bytes[4] = 2;
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(read_tensor(scratch("does_not_exist.stcv")), Error);
  }
}
