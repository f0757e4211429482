#include "shaspec/binary_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace shaspec {

namespace {
constexpr std::uint8_t kMaxRank = 8;
}

void ByteWriter::put(std::uint64_t v, int n) {
  for (int k = 0; k < n; ++k) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::raw(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  bytes_.insert(bytes_.end(), p, p + n);
}

void ByteWriter::tensor(const Tensor& t) {
  u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) u64(d);
  for (double v : t.data()) f32(static_cast<float>(v));
}

void ByteWriter::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

ByteReader ByteReader::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read from '" + path.string() + "' failed");
  return ByteReader(std::move(bytes));
}

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) fail("unexpected end of file (need " + std::to_string(n) + " bytes)");
}

std::uint64_t ByteReader::get(int n) {
  need(static_cast<std::size_t>(n));
  std::uint64_t v = 0;
  for (int k = 0; k < n; ++k) v |= static_cast<std::uint64_t>(bytes_[pos_ + k]) << (8 * k);
  pos_ += static_cast<std::size_t>(n);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::string(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

Tensor ByteReader::tensor() {
  const auto start = pos_;
  const auto rank = u8();
  if (rank == 0 || rank > kMaxRank) throw FormatError("invalid tensor rank " + std::to_string(rank), start);
  Shape shape;
  std::uint64_t count = 1;
  for (int k = 0; k < rank; ++k) {
    const auto at = pos_;
    const auto d = u64();
    if (d == 0 || d > (1ull << 32)) throw FormatError("invalid tensor dimension " + std::to_string(d), at);
    count *= d;
    if (count > (1ull << 34)) throw FormatError("tensor too large", at);
    shape.push_back(static_cast<std::size_t>(d));
  }
  need(static_cast<std::size_t>(count) * 4);
  std::vector<double> values(static_cast<std::size_t>(count));
  for (auto& v : values) {
    const auto at = pos_;
    v = f32();
    if (!std::isfinite(v)) throw FormatError("non-finite tensor value", at);
  }
  return Tensor(std::move(shape), std::move(values));
}

void ByteReader::expect_magic(const std::string& magic) {
  const auto at = pos_;
  if (bytes_.size() - pos_ < magic.size() || string(magic.size()) != magic)
    throw FormatError("bad magic (expected '" + magic + "')", at);
}

}  // namespace shaspec
