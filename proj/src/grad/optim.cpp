#include "shaspec/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace shaspec {

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd_nesterov" || name == "sgd" || name == "nesterov") return OptimizerKind::sgd_nesterov;
  if (name == "adam" || name == "adamw") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer '" + std::string(name) + "'");
}

std::string_view optimizer_kind_name(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd_nesterov";
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Parameter*> params) : params_(std::move(params)) {
  if (config.weight_decay < 0.0) throw ValidationError("weight decay must be non-negative");
  state_.config = config;
  for (const auto* p : params_) {
    state_.first.emplace_back(p->value.shape());
    if (config.kind == OptimizerKind::adam) state_.second.emplace_back(p->value.shape());
  }
}

void Optimizer::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Optimizer::restore(OptimizerState state) {
  const bool adam = state_.config.kind == OptimizerKind::adam;
  if (state.config.kind != state_.config.kind) throw ValidationError("optimizer kind mismatch on restore");
  if (state.first.size() != params_.size() || (adam && state.second.size() != params_.size()))
    throw DimensionError("optimizer state does not match parameter count");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (state.first[i].shape() != params_[i]->value.shape() ||
        (adam && state.second[i].shape() != params_[i]->value.shape()))
      throw DimensionError("optimizer buffer shape mismatch for '" + params_[i]->name + "'");
  }
  state_ = std::move(state);
}

void Optimizer::step(double lr) { step(lr, std::vector<bool>(params_.size(), true)); }

void Optimizer::step(double lr, const std::vector<bool>& active) {
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  if (active.size() != params_.size()) throw DimensionError("active flags do not match the parameter list");
  const auto& c = state_.config;
  ++state_.step_count;
  if (c.kind == OptimizerKind::sgd_nesterov) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (!active[k]) continue;
      auto& p = params_[k]->value;
      const auto& g = params_[k]->grad;
      auto& v = state_.first[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + c.weight_decay * p[i];
        v[i] = c.momentum * v[i] + gi;
        p[i] -= lr * (gi + c.momentum * v[i]);
      }
    }
    return;
  }
  const double t = static_cast<double>(state_.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!active[k]) continue;
    auto& p = params_[k]->value;
    const auto& g = params_[k]->grad;
    auto& m = state_.first[k];
    auto& v = state_.second[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= lr * c.weight_decay * p[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0) {
  if (!(lr0 > 0.0)) throw ValidationError("lr0 must be positive");
  if (total_steps <= 0) throw ValidationError("total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ValidationError("step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace shaspec
