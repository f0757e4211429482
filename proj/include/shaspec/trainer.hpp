#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shaspec/objectives.hpp"
#include "shaspec/optim.hpp"
#include "shaspec/synth.hpp"

namespace shaspec {

enum class Schedule { cosine, constant };
Schedule parse_schedule(std::string_view name);
std::string_view schedule_name(Schedule s);

struct TrainConfig {
  std::size_t iterations = 5000;
  std::size_t batch_size = 16;
  // Nesterov SGD at lr 1e-2 diverges or stalls at this scale; see README.
  OptimizerConfig optimizer = OptimizerConfig::adam();
  double lr = 1e-3;
  Schedule schedule = Schedule::cosine;
  LossWeights weights;
  AvailabilityPolicy availability = AvailabilityPolicy::uniform_subset();
  std::uint64_t seed = 0;
  /// 0 disables periodic checkpoints; a final one is always written when
  /// output_dir is set.
  std::size_t checkpoint_interval = 0;
  std::size_t log_interval = 1;
  std::filesystem::path output_dir;

  /// Desk-scale defaults for a task.
  static TrainConfig defaults_for(TaskKind task);
  void validate() const;
  double lr_at(std::size_t iteration) const;
};

struct LogRow {
  std::size_t iter = 0;  // iterations completed
  double lr = 0, task = 0, dao = 0, dco = 0, total = 0;
};

std::string metrics_header();
/// One CSV line, values with 9 significant digits.
std::string format_metrics_row(const LogRow& row);

/// Non-finite values during training; the message names the iteration and
/// the component losses computed so far.
class TrainingAborted : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Model architecture for a dataset: task, modality count, input shapes and
/// class count come from the data, everything else from `base`.
ModelConfig model_config_for(const Dataset& data, ModelConfig base);

/// Step-wise training loop. Batch composition, masks and dropout of
/// iteration k depend only on (seed, k), so a resumed run follows the same
/// trajectory as an uninterrupted one.
class Trainer {
 public:
  Trainer(ShaSpecModel& model, const Dataset& data, TrainConfig config);

  /// Runs one iteration and returns its losses.
  LogRow step();
  /// Runs until `config.iterations`, logging every log_interval iterations to
  /// `on_log` and, when output_dir is set, to metrics.csv and checkpoints.
  std::vector<LogRow> run(const std::function<void(const LogRow&)>& on_log = {});

  std::size_t iteration() const { return iteration_; }
  Optimizer& optimizer() { return optimizer_; }
  const TrainConfig& config() const { return config_; }
  /// Continues from a checkpointed state.
  void resume(const OptimizerState& state, std::size_t iteration);
  /// Mask iteration k trains under.
  ModalityMask mask_at(std::size_t k) const;
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::size_t> draw_batch(const ModalityMask& mask, std::size_t k);

  ShaSpecModel& model_;
  const Dataset& data_;
  TrainConfig config_;
  Optimizer optimizer_;
  std::size_t iteration_ = 0;
  std::map<std::uint64_t, std::vector<std::size_t>> candidates_;
};

std::vector<LogRow> train(ShaSpecModel& model, const Dataset& data, const TrainConfig& config);
/// Training where every batch uses the fixed evaluation mask. Requires a
/// fixed_mask availability policy.
std::vector<LogRow> train_dedicated(ShaSpecModel& model, const Dataset& data, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints ("SHSP")

struct LoadedCheckpoint {
  ShaSpecModel model;
  OptimizerState optimizer;
  std::uint64_t iteration = 0;
  /// Resolved configuration (model.*, train.* keys).
  std::map<std::string, std::string> config;
};

std::vector<std::uint8_t> encode_checkpoint(const ShaSpecModel& model, const OptimizerState& optimizer,
                                            std::uint64_t iteration, const TrainConfig& train);
void save_checkpoint(const std::filesystem::path& path, const ShaSpecModel& model, const OptimizerState& optimizer,
                     std::uint64_t iteration, const TrainConfig& train);
/// Throws FormatError (with offset) on malformed input, IoError when the
/// file cannot be read. Nothing is returned on failure.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace shaspec
