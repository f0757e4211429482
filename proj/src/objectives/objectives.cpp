#include "shaspec/objectives.hpp"

#include <cmath>
#include <string>

namespace shaspec {

namespace O = ops;

void LossWeights::validate() const {
  if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0.0 || beta < 0.0)
    throw ValidationError("loss weights must be finite and non-negative");
}

Tensor AlignmentTargets::one_hot(std::size_t modality, std::size_t n) {
  if (modality >= n) throw ValidationError("modality index out of range");
  Tensor t(Shape{n});
  t[modality] = 1.0;
  return t;
}

Tensor AlignmentTargets::uniform(std::size_t n) { return Tensor(Shape{n}, 1.0 / static_cast<double>(n)); }

namespace {

Var zero(Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

Var accumulate(Tape& tape, const std::vector<Var>& terms) {
  if (terms.empty()) return zero(tape);
  Var acc = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) acc = O::add(acc, terms[k]);
  return acc;
}

const Var& require(const std::optional<Var>& v, const char* what, std::size_t i) {
  if (!v) throw ContractError(std::string(what) + " feature of available modality " + std::to_string(i) + " is absent");
  return *v;
}

}  // namespace

Var dco_loss(Tape& tape, ShaSpecModel& model, const FeatureBundle& bundle, const ModalityMask& mask) {
  const std::size_t n = model.modality_count();
  std::vector<Var> terms;
  for (auto i : mask.available_indices()) {
    const Var s = require(bundle.specific.at(i), "specific", i);
    terms.push_back(O::cross_entropy_soft(model.dco_logits(tape, model.pool(s)), AlignmentTargets::one_hot(i, n)));
  }
  return accumulate(tape, terms);
}

Var dao_loss(Tape& tape, ShaSpecModel& model, const FeatureBundle& bundle, const ModalityMask& mask,
             const DaoVariant& variant) {
  const auto avail = mask.available_indices();
  std::vector<Var> shared;
  for (auto i : avail) shared.push_back(require(bundle.shared.at(i), "shared", i));
  std::vector<Var> terms;
  switch (variant.kind) {
    case DaoKind::ce_uniform: {
      const Tensor u = AlignmentTargets::uniform(model.modality_count());
      for (const auto& r : shared) terms.push_back(O::cross_entropy_soft(model.dao_logits(tape, model.pool(r)), u));
      break;
    }
    case DaoKind::kl_pairwise: {
      if (shared.size() < 2) break;
      std::vector<Var> probs;
      for (const auto& r : shared) probs.push_back(O::softmax(model.dao_logits(tape, model.pool(r))));
      for (std::size_t i = 0; i < probs.size(); ++i)
        for (std::size_t k = 0; k < probs.size(); ++k)
          if (i != k) terms.push_back(O::kl_div(probs[i], probs[k]));
      break;
    }
    case DaoKind::pnorm:
      for (std::size_t i = 0; i < shared.size(); ++i)
        for (std::size_t k = i + 1; k < shared.size(); ++k)
          terms.push_back(O::pnorm_distance(shared[i], shared[k], variant.p));
      break;
  }
  return accumulate(tape, terms);
}

Var dice_loss(Var logits, const Tensor& labels) {
  const Shape s = logits.shape();
  if (s.size() != 4) throw DimensionError("dice_loss expects [B x K x H x W] logits, got " + shape_to_string(s));
  const std::size_t b = s[0], k = s[1], hw = s[2] * s[3];
  if (labels.shape() != Shape{b, s[2], s[3]})
    throw DimensionError("dice_loss labels " + shape_to_string(labels.shape()) + " do not match logits " +
                         shape_to_string(s));
  if (k < 2) throw DimensionError("dice_loss needs at least two classes");
  for (double v : labels.data())
    if (v < 0.0 || v >= static_cast<double>(k) || v != std::floor(v))
      throw ValidationError("segmentation label " + std::to_string(v) + " out of range");

  Tape& tape = logits.tape();
  const Var probs = O::softmax_channels(logits);
  std::vector<Var> terms;
  for (std::size_t c = 1; c < k; ++c) {
    Tensor truth(s), select(s);
    double truth_count = 0.0;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t at = (n * k + c) * hw + p;
        select[at] = 1.0;
        if (labels[n * hw + p] == static_cast<double>(c)) {
          truth[at] = 1.0;
          truth_count += 1.0;
        }
      }
    const Var overlap = O::sum(O::mul_const(probs, truth));
    const Var predicted = O::sum(O::mul_const(probs, select));
    const Var num = O::add(O::scale(overlap, 2.0), tape.constant(Tensor::scalar(kDiceEpsilon)));
    const Var den = O::add(predicted, tape.constant(Tensor::scalar(truth_count + kDiceEpsilon)));
    terms.push_back(O::sub(tape.constant(Tensor::scalar(1.0)), O::div(num, den)));
  }
  return O::scale(accumulate(tape, terms), 1.0 / static_cast<double>(k - 1));
}

Var task_loss(Var prediction, const Batch& batch, TaskKind task) {
  if (task == TaskKind::segmentation) {
    if (!batch.segmentation_labels) throw ContractError("segmentation batch without label maps");
    return dice_loss(prediction, *batch.segmentation_labels);
  }
  const Shape s = prediction.shape();
  if (s.size() != 2 || s[0] != batch.class_labels.size())
    throw DimensionError("classification logits " + shape_to_string(s) + " do not match " +
                         std::to_string(batch.class_labels.size()) + " labels");
  Tensor target(s);
  for (std::size_t r = 0; r < s[0]; ++r) {
    const auto y = batch.class_labels[r];
    if (y >= s[1]) throw ValidationError("class label " + std::to_string(y) + " out of range");
    target[r * s[1] + y] = 1.0;
  }
  return O::cross_entropy_soft(prediction, target);
}

LossTerms total_loss(Tape& tape, ShaSpecModel& model, const ForwardResult& result, const Batch& batch,
                     const LossWeights& weights, const DaoVariant& variant) {
  weights.validate();
  LossTerms t;
  t.task = task_loss(result.prediction, batch, model.task());
  t.dao = dao_loss(tape, model, result.bundle, batch.mask, variant);
  t.dco = dco_loss(tape, model, result.bundle, batch.mask);
  t.total = O::add(O::add(t.task, O::scale(t.dao, weights.alpha)), O::scale(t.dco, weights.beta));
  return t;
}

}  // namespace shaspec
