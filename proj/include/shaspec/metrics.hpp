#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shaspec/model.hpp"

namespace shaspec {

/// Row-wise argmax of [B x K] scores; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

/// Fraction of rows whose argmax equals the label.
double accuracy(const Tensor& scores, std::span<const std::uint32_t> labels);

/// 2|P & G| / (|P| + |G|) over non-zero entries; 1 when both are empty.
double dice_score(const Tensor& pred, const Tensor& truth);

/// Removes foreground components smaller than `min_region` pixels, where
/// pixels within Chebyshev distance 2 belong to the same component. `mask`
/// is a binary [H x W] map.
Tensor smoothness_enhance(const Tensor& mask, long min_region = 4);

/// Mean silhouette coefficient with Euclidean distance. Points whose intra-
/// and nearest-cluster distances are both zero score 0.
double silhouette(const std::vector<std::vector<double>>& points, std::span<const std::size_t> labels);

struct EvalOptions {
  std::size_t batch_size = 64;
  /// Applies smoothness_enhance with this min_region to segmentation outputs.
  std::optional<long> smooth;
  /// Recorded in the report rows (the training seed).
  std::uint64_t seed = 0;
};

struct EvalRow {
  std::string mask;  // N characters, first = modality 1
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  /// One row per metric with mask "avg": the mean over `rows`.
  std::vector<EvalRow> aggregate;

  std::string to_csv() const;
};

/// Task metric ("accuracy", "dice" or "dice_smoothed") of `model` on the
/// samples providing every modality of `mask`, evaluated under `mask`.
double evaluate_mask(ShaSpecModel& model, const Dataset& data, const ModalityMask& mask, const EvalOptions& opts = {});
std::string metric_name(TaskKind task, const EvalOptions& opts);

EvalReport eval_subsets(ShaSpecModel& model, const Dataset& data, const std::vector<ModalityMask>& masks,
                        const EvalOptions& opts = {});
/// Every non-empty mask, ordered by cardinality.
EvalReport eval_all_subsets(ShaSpecModel& model, const Dataset& data, const EvalOptions& opts = {});

/// Pooled shared and specific features of every available modality,
/// labelled by modality index.
struct FeatureSet {
  std::vector<std::vector<double>> shared, specific;
  std::vector<std::size_t> modality, sample;
};
FeatureSet collect_features(ShaSpecModel& model, const Dataset& data, std::size_t max_samples = 0);

struct FeatureStats {
  double shared = 0.0;
  double specific = 0.0;
};
FeatureStats feature_silhouettes(ShaSpecModel& model, const Dataset& data, std::size_t max_samples = 300);

/// CSV `kind,modality,sample,dim0..`; modality is 1-based.
std::string embeddings_csv(ShaSpecModel& model, const Dataset& data);
void export_embeddings(ShaSpecModel& model, const Dataset& data, const std::filesystem::path& path);

}  // namespace shaspec
