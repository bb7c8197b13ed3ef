#include <array>
#include <bit>
#include <fstream>
#include <iterator>
#include <limits>

#include "structconv/error.hpp"
#include "structconv/tensor.hpp"

namespace structconv {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'S', 'T', 'C', 'V'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 32;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint32_t u32(const char* what) {
    if (remaining() < 4) throw FormatError(std::string("truncated header: missing ") + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.rank() > kMaxRank) throw FormatError("rank overflow");
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.reserve(12 + 4 * t.rank() + 8 * t.size());
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw FormatError("extent overflow");
    put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw FormatError("bad magic");
  }
  Reader in(bytes.subspan(4));
  const auto version = in.u32("version");
  if (version != kVersion) throw FormatError("unsupported version " + std::to_string(version));
  const auto rank = in.u32("rank");
  if (rank == 0 || rank > kMaxRank) throw FormatError("rank overflow: " + std::to_string(rank));
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto e = in.u32("extent");
    if (e == 0) throw FormatError("zero extent");
    // The payload must fit in the remaining bytes, so anything past that bound
    // is an overflow rather than a plain truncation.
    if (count > std::numeric_limits<std::uint64_t>::max() / 8 / e) throw FormatError("extent overflow");
    count *= e;
    shape.push_back(e);
  }
  if (count > in.remaining() / 8) {
    throw FormatError("truncated payload: header declares " + std::to_string(count) +
                      " values, file holds " + std::to_string(in.remaining() / 8));
  }
  if (in.remaining() != count * 8) throw FormatError("trailing bytes after payload");
  std::vector<double> data(count);
  for (auto& v : data) v = std::bit_cast<double>(in.u64());
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

}  // namespace structconv
