#pragma once

#include <cstdint>
#include <span>

#include "shaspec/model.hpp"

namespace shaspec {

struct LossWeights {
  double alpha = 0.1;  // alignment
  double beta = 0.02;  // domain classification
  void validate() const;
};

struct AlignmentTargets {
  /// t^(i): 1 at position i, 0 elsewhere.
  static Tensor one_hot(std::size_t modality, std::size_t n);
  /// u: 1/n everywhere.
  static Tensor uniform(std::size_t n);
};

/// Sum over available i of CE(dco(pool(s_i)), t_i), each batch-averaged.
/// Missing modalities contribute nothing.
Var dco_loss(Tape& tape, ShaSpecModel& model, const FeatureBundle& bundle, const ModalityMask& mask);

/// ce: sum over available i of CE(dao(pool(r_i)), u).
/// kl: sum over ordered available pairs (i, k), i != k, of
///     KL(softmax(dao(pool(r_i))) || softmax(dao(pool(r_k)))).
/// p-norm: sum over unordered available pairs of the distance between r_i and r_k.
/// Pairwise variants are exactly 0 with a single available modality.
Var dao_loss(Tape& tape, ShaSpecModel& model, const FeatureBundle& bundle, const ModalityMask& mask,
             const DaoVariant& variant);

inline constexpr double kDiceEpsilon = 1e-5;

/// Soft Dice loss averaged over foreground classes 1..K-1:
/// 1 - (2 sum p g + eps) / (sum p + sum g + eps), sums over batch and pixels.
/// `logits` is [B x K x H x W]; `labels` is [B x H x W] of class indices.
Var dice_loss(Var logits, const Tensor& labels);

/// Mean cross-entropy (classification) or soft Dice (segmentation). Labels out
/// of range raise ValidationError.
Var task_loss(Var prediction, const Batch& batch, TaskKind task);

struct LossTerms {
  Var task, dao, dco, total;
};

/// total = task + alpha * dao + beta * dco.
LossTerms total_loss(Tape& tape, ShaSpecModel& model, const ForwardResult& result, const Batch& batch,
                     const LossWeights& weights, const DaoVariant& variant);

}  // namespace shaspec
