#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <variant>
#include <vector>

#include "shaspec/mask.hpp"
#include "shaspec/tensor.hpp"

namespace shaspec {

enum class TaskKind : std::uint8_t { classification = 0, segmentation = 1 };

TaskKind parse_task_kind(std::string_view name);
std::string_view task_kind_name(TaskKind kind);

/// Class index (classification) or an H x W map of class indices stored as
/// doubles (segmentation).
using Label = std::variant<std::uint32_t, Tensor>;

/// One multi-modal example: inputs[i] is present iff mask[i].
struct ModalitySample {
  std::vector<std::optional<Tensor>> inputs;
  ModalityMask mask;
  Label label;
};

struct Dataset {
  TaskKind task = TaskKind::classification;
  std::size_t modality_count = 0;
  std::vector<ModalitySample> samples;

  std::size_t size() const { return samples.size(); }
  /// Declared per-modality input shape, taken from the first sample that has
  /// the modality.
  Shape modality_shape(std::size_t modality) const;
  /// Number of classes: max label + 1 (classification) or max map value + 1.
  std::size_t class_count() const;
  /// Checks the sample invariants; throws ValidationError/DimensionError.
  void validate() const;
};

}  // namespace shaspec
