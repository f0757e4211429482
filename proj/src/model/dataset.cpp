#include "shaspec/dataset.hpp"

#include <algorithm>
#include <string>

namespace shaspec {

TaskKind parse_task_kind(std::string_view name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "segmentation") return TaskKind::segmentation;
  throw ValidationError("unknown task kind '" + std::string(name) + "'");
}

std::string_view task_kind_name(TaskKind kind) {
  return kind == TaskKind::classification ? "classification" : "segmentation";
}

Shape Dataset::modality_shape(std::size_t modality) const {
  for (const auto& s : samples)
    if (modality < s.inputs.size() && s.inputs[modality]) return s.inputs[modality]->shape();
  throw ValidationError("modality " + std::to_string(modality) + " never present in dataset");
}

std::size_t Dataset::class_count() const {
  std::size_t k = 0;
  for (const auto& s : samples) {
    if (const auto* c = std::get_if<std::uint32_t>(&s.label)) {
      k = std::max<std::size_t>(k, *c + 1);
    } else {
      for (double v : std::get<Tensor>(s.label).data()) k = std::max<std::size_t>(k, static_cast<std::size_t>(v) + 1);
    }
  }
  return std::max<std::size_t>(k, 2);
}

void Dataset::validate() const {
  std::vector<std::optional<Shape>> shapes(modality_count);
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto& s = samples[j];
    if (s.inputs.size() != modality_count || s.mask.size() != modality_count)
      throw DimensionError("sample " + std::to_string(j) + " has the wrong modality count");
    for (std::size_t i = 0; i < modality_count; ++i) {
      if (s.inputs[i].has_value() != s.mask[i])
        throw ValidationError("sample " + std::to_string(j) + ": input presence disagrees with mask at modality " +
                              std::to_string(i));
      if (!s.inputs[i]) continue;
      if (!shapes[i]) shapes[i] = s.inputs[i]->shape();
      if (*shapes[i] != s.inputs[i]->shape())
        throw DimensionError("sample " + std::to_string(j) + ": modality " + std::to_string(i) + " has shape " +
                             shape_to_string(s.inputs[i]->shape()));
    }
    const bool is_class = std::holds_alternative<std::uint32_t>(s.label);
    if (is_class != (task == TaskKind::classification))
      throw ValidationError("sample " + std::to_string(j) + ": label kind does not match task");
  }
}

}  // namespace shaspec
