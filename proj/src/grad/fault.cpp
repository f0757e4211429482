#include "shaspec/fault.hpp"

#include <atomic>
#include <string>

#include "shaspec/tensor.hpp"

namespace shaspec::fault {

namespace {
std::atomic<Rule> g_rule{Rule::none};
}

void corrupt(Rule rule) { g_rule.store(rule, std::memory_order_relaxed); }

Rule corrupted() { return g_rule.load(std::memory_order_relaxed); }

Rule parse_rule(std::string_view name) {
  if (name == "none") return Rule::none;
  if (name == "matmul") return Rule::matmul;
  if (name == "tanh") return Rule::tanh;
  if (name == "conv2d") return Rule::conv2d;
  if (name == "softmax") return Rule::softmax;
  throw ValidationError("unknown fault rule '" + std::string(name) + "'");
}

}  // namespace shaspec::fault
