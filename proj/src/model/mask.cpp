#include "shaspec/mask.hpp"

#include <algorithm>

#include "shaspec/tensor.hpp"

namespace shaspec {

ModalityMask::ModalityMask(std::vector<bool> available) : available_(std::move(available)) {
  if (std::none_of(available_.begin(), available_.end(), [](bool b) { return b; }))
    throw ContractError("modality mask must have at least one available modality");
}

ModalityMask ModalityMask::full(std::size_t n) { return ModalityMask(std::vector<bool>(n, true)); }

ModalityMask ModalityMask::from_bits(std::string_view bits) {
  std::vector<bool> v;
  for (char c : bits) {
    if (c != '0' && c != '1') throw ValidationError("mask bits must be 0/1, got '" + std::string(bits) + "'");
    v.push_back(c == '1');
  }
  if (v.empty()) throw ValidationError("empty mask bit string");
  if (std::none_of(v.begin(), v.end(), [](bool b) { return b; }))
    throw ValidationError("mask '" + std::string(bits) + "' has no available modality");
  return ModalityMask(std::move(v));
}

ModalityMask ModalityMask::from_flags(std::uint64_t bits, std::size_t n) {
  std::vector<bool> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (bits >> i) & 1u;
  return ModalityMask(std::move(v));
}

std::vector<ModalityMask> ModalityMask::all_nonempty(std::size_t n) {
  std::vector<ModalityMask> out;
  for (std::size_t k = 1; k <= n; ++k) {
    // Lexicographically descending bit strings of weight k put earlier
    // modalities first.
    std::vector<bool> sel(n, false);
    std::fill(sel.begin(), sel.begin() + static_cast<long>(k), true);
    do {
      out.emplace_back(sel);
    } while (std::prev_permutation(sel.begin(), sel.end()));
  }
  return out;
}

std::size_t ModalityMask::count() const {
  return static_cast<std::size_t>(std::count(available_.begin(), available_.end(), true));
}

std::vector<std::size_t> ModalityMask::available_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < available_.size(); ++i)
    if (available_[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> ModalityMask::missing_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < available_.size(); ++i)
    if (!available_[i]) out.push_back(i);
  return out;
}

std::string ModalityMask::bits() const {
  std::string s;
  for (bool b : available_) s += b ? '1' : '0';
  return s;
}

std::uint64_t ModalityMask::flags() const {
  std::uint64_t f = 0;
  for (std::size_t i = 0; i < available_.size(); ++i)
    if (available_[i]) f |= (std::uint64_t{1} << i);
  return f;
}

}  // namespace shaspec
