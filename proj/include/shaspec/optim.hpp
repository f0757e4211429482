#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "shaspec/tape.hpp"

namespace shaspec {

enum class OptimizerKind { sgd_nesterov, adam };

OptimizerKind parse_optimizer_kind(std::string_view name);
std::string_view optimizer_kind_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_nesterov;
  double momentum = 0.99;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Coupled L2 for SGD, decoupled (AdamW) for Adam.
  double weight_decay = 0.0;

  static OptimizerConfig nesterov(double momentum = 0.99) { return {OptimizerKind::sgd_nesterov, momentum}; }
  static OptimizerConfig adam(double weight_decay = 1e-2) {
    OptimizerConfig c;
    c.kind = OptimizerKind::adam;
    c.weight_decay = weight_decay;
    return c;
  }
};

/// Per-parameter auxiliary buffers. For SGD only `first` (velocity) is used;
/// for Adam `first`/`second` hold the moment estimates.
struct OptimizerState {
  OptimizerConfig config;
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::uint64_t step_count = 0;
};

/// In-place update of a fixed, ordered parameter list.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Parameter*> params);

  /// Applies one update using each parameter's accumulated grad.
  /// Throws ValidationError when lr <= 0.
  void step(double lr);
  /// As step(lr), but parameters with active[k] == false (and their buffers)
  /// are left untouched, e.g. encoders of modalities absent from the batch.
  void step(double lr, const std::vector<bool>& active);
  void zero_grad();

  const OptimizerState& state() const { return state_; }
  /// Replaces the buffers, e.g. after loading a checkpoint. Shapes must match.
  void restore(OptimizerState state);
  const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  OptimizerState state_;
};

/// lr0 * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0);

}  // namespace shaspec
