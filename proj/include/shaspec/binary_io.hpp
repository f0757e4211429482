#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "shaspec/tensor.hpp"

namespace shaspec {

/// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file's contents do not follow the expected layout.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Little-endian encoder into an in-memory buffer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v);
  void raw(const void* data, std::size_t n);
  /// rank u8, dims u64 x rank, values f32.
  void tensor(const Tensor& t);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  void save(const std::filesystem::path& path) const;

 private:
  void put(std::uint64_t v, int n);
  std::vector<std::uint8_t> bytes_;
};

/// Little-endian decoder; every failure reports the offending offset.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  static ByteReader load(const std::filesystem::path& path);

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32();
  std::string string(std::size_t n);
  Tensor tensor();
  /// Checks the next bytes against `magic`.
  void expect_magic(const std::string& magic);

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, pos_); }

 private:
  std::uint64_t get(int n);
  void need(std::size_t n) const;
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace shaspec
