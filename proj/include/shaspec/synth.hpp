#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "shaspec/dataset.hpp"
#include "shaspec/rng.hpp"

namespace shaspec {

struct SynthSpec {
  TaskKind task = TaskKind::classification;
  std::size_t modality_count = 3;
  std::uint64_t seed = 0;
  /// Which sample stream to draw (e.g. 0 = train, 1 = test). Rendering
  /// parameters depend on `seed` only, so streams share them.
  std::uint64_t stream = 0;
  std::size_t sample_count = 2000;

  // classification: x_i = A_i z + B_i v_i + noise
  std::size_t input_dim = 32;
  std::size_t shared_latent_dim = 8;
  std::size_t specific_latent_dim = 8;
  std::size_t class_count = 4;
  double class_separation = 6.0;  // distance scale of class means of z
  double specific_scale = 1.0;    // std of v_i
  double noise = 3.0;             // sigma of the additive noise

  // segmentation
  std::size_t image_size = 16;
  std::size_t min_area = 16;
  std::size_t max_area = 80;
  double texture = 0.1;

  void validate() const;
};

/// Per-modality rendering matrices of a classification spec.
struct RenderingMatrices {
  std::vector<Tensor> shared;    // A_i: [input_dim x shared_latent_dim]
  std::vector<Tensor> specific;  // B_i: [input_dim x specific_latent_dim]
  Tensor class_means;            // [class_count x shared_latent_dim]
};
RenderingMatrices rendering_matrices(const SynthSpec& spec);

/// One classification draw with its latent factors exposed (for probes).
struct LatentSample {
  std::uint32_t label;
  Tensor z;
  std::vector<Tensor> v;
  std::vector<Tensor> x;
};
LatentSample draw_classification(const SynthSpec& spec, const RenderingMatrices& m, std::size_t index);

/// Class-balanced: sample j has label j mod class_count.
Dataset generate_classification(const SynthSpec& spec);
/// One elliptical blob per sample rendered with per-modality intensity
/// transfer and texture; label map is 1 on the blob.
Dataset generate_segmentation(const SynthSpec& spec);
Dataset generate(const SynthSpec& spec);

enum class AvailabilityMode { full, uniform_subset, per_modality_rate, fixed_mask };
AvailabilityMode parse_availability_mode(std::string_view name);
std::string_view availability_mode_name(AvailabilityMode m);

struct AvailabilityPolicy {
  AvailabilityMode mode = AvailabilityMode::uniform_subset;
  std::vector<double> rates;                         // per_modality_rate
  std::optional<ModalityMask> mask;                  // fixed_mask

  static AvailabilityPolicy full() { return {AvailabilityMode::full, {}, std::nullopt}; }
  static AvailabilityPolicy uniform_subset() { return {AvailabilityMode::uniform_subset, {}, std::nullopt}; }
  static AvailabilityPolicy per_modality_rate(std::vector<double> r) {
    return {AvailabilityMode::per_modality_rate, std::move(r), std::nullopt};
  }
  static AvailabilityPolicy fixed(ModalityMask m) { return {AvailabilityMode::fixed_mask, {}, std::move(m)}; }

  void validate(std::size_t modality_count) const;
};

/// One mask drawn from `rng`. Never empty.
ModalityMask draw_mask(const AvailabilityPolicy& policy, std::size_t n, Rng& rng);
/// `count` masks; mask k depends only on (seed, k).
std::vector<ModalityMask> realize_masks(const AvailabilityPolicy& policy, std::size_t n, std::size_t count,
                                        std::uint64_t seed);

/// Dataset container ("SHDS").
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_dataset(const Dataset& data);

}  // namespace shaspec
