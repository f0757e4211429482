#pragma once

#include <string_view>

namespace shaspec::fault {

/// Backward rules that can be deliberately broken to exercise the gradient
/// checker. Never enabled outside verification fixtures.
enum class Rule { none, matmul, tanh, conv2d, softmax };

void corrupt(Rule rule);
Rule corrupted();
inline bool is_corrupted(Rule rule) { return corrupted() == rule; }
/// Multiplier a corrupted rule applies to its parent gradients.
inline constexpr double kCorruptionFactor = 1.01;

Rule parse_rule(std::string_view name);

/// Restores the previous setting on scope exit.
class ScopedCorruption {
 public:
  explicit ScopedCorruption(Rule rule) : previous_(corrupted()) { corrupt(rule); }
  ~ScopedCorruption() { corrupt(previous_); }
  ScopedCorruption(const ScopedCorruption&) = delete;
  ScopedCorruption& operator=(const ScopedCorruption&) = delete;

 private:
  Rule previous_;
};

}  // namespace shaspec::fault
