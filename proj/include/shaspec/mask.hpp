#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace shaspec {

/// Which modalities are present. At least one entry is always true.
class ModalityMask {
 public:
  explicit ModalityMask(std::vector<bool> available);

  static ModalityMask full(std::size_t n);
  /// Parses an N-character 0/1 string; character i is modality i (the first
  /// character is the most significant).
  static ModalityMask from_bits(std::string_view bits);
  /// Bit i of `bits` is modality i.
  static ModalityMask from_flags(std::uint64_t bits, std::size_t n);
  /// Every non-empty mask over n modalities ordered by cardinality, then with
  /// earlier modalities first (100, 010, 001, 110, 101, 011, 111).
  static std::vector<ModalityMask> all_nonempty(std::size_t n);

  std::size_t size() const { return available_.size(); }
  bool operator[](std::size_t i) const { return available_[i]; }
  std::size_t count() const;
  bool is_full() const { return count() == size(); }
  std::vector<std::size_t> available_indices() const;
  std::vector<std::size_t> missing_indices() const;

  std::string bits() const;
  std::uint64_t flags() const;

  friend bool operator==(const ModalityMask&, const ModalityMask&) = default;

 private:
  std::vector<bool> available_;
};

}  // namespace shaspec
