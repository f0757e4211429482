#pragma once

#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "shaspec/config.hpp"
#include "shaspec/fault.hpp"
#include "shaspec/metrics.hpp"
#include "shaspec/trainer.hpp"

namespace shaspec::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kIo = 3, kNumerical = 4, kVerification = 5 };

/// A verification command found a discrepancy.
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exit code for an exception escaping a command.
int exit_code_for(const std::exception_ptr& error);

inline constexpr const char* kTrainFile = "train.shds";
inline constexpr const char* kTestFile = "test.shds";
inline constexpr const char* kResolvedFile = "resolved.cfg";
inline constexpr const char* kCheckpointFile = "checkpoint.shsp";

/// Config file (optional) overlaid with `key=value` overrides; unknown keys
/// are rejected.
KeyValues load_run_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides);
void write_resolved(const fs::path& dir, const KeyValues& kv);

// gen-data ------------------------------------------------------------------

struct GenDataResult {
  SynthSpec spec;
  std::size_t train_count = 0, test_count = 0;
};
/// Writes train.shds, test.shds, manifest.txt and resolved.cfg into `out`.
GenDataResult gen_data(const KeyValues& config, const fs::path& out);

/// `path` may name a dataset file or a directory holding `file`.
Dataset load_split(const fs::path& path, const char* file);

// train ---------------------------------------------------------------------

struct TrainRequest {
  KeyValues config;
  fs::path data;
  fs::path out;
  std::optional<std::string> dedicated_mask;
  bool resume = false;
  std::function<void(const LogRow&)> on_log;
};

struct ResolvedRun {
  ModelConfig model;
  TrainConfig train;
};
ResolvedRun resolve_run(const KeyValues& config, const Dataset& data, const std::optional<std::string>& dedicated_mask);

std::vector<LogRow> train_command(const TrainRequest& request);

// eval ----------------------------------------------------------------------

struct EvalRequest {
  fs::path checkpoint;
  fs::path data;
  std::string subsets = "all";
  std::optional<long> smooth;
  std::optional<fs::path> features;
  std::optional<fs::path> embeddings;
};

/// Masks named by `spec`: "all" or comma-separated bitstrings.
std::vector<ModalityMask> parse_subsets(const std::string& spec, std::size_t modality_count);

EvalReport eval_command(const EvalRequest& request);
std::string features_csv(const FeatureStats& stats);

// sweep ---------------------------------------------------------------------

struct SweepRequest {
  std::string param;  // alpha, beta, dao or audio_rate
  std::vector<std::string> values;
  KeyValues config;
  fs::path data;
  fs::path out;
  unsigned threads = 1;
};

inline constexpr const char* kSweepHeader = "param,setting,mask,metric,value,seed";

/// Config overrides for one sweep setting; throws ConfigError on bad values.
KeyValues sweep_overrides(const std::string& param, const std::string& value, std::size_t modality_count);
/// Trains one model per value and writes out/sweep.csv; returns its text.
std::string sweep_command(const SweepRequest& request);
/// SHASPEC_THREADS, default 1.
unsigned threads_from_env();

// report --------------------------------------------------------------------

/// Standalone SVG for an eval or sweep CSV. Throws ConfigError on malformed
/// input or an empty body.
std::string render_svg(const std::string& csv);

// grad-check ----------------------------------------------------------------

struct GradCheckRequest {
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  double tol = 1e-4;
  fault::Rule corrupt = fault::Rule::none;
};

struct GradCheckCase {
  std::string label;  // task/dao/mask/seed
  double worst = 0.0;
  std::string worst_param;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double worst = 0.0;
  std::string worst_param;
  std::string worst_case;
  std::size_t parameters_checked = 0;
};

/// Relative error with a floor so tiny gradients compare absolutely.
inline constexpr double kRelErrorFloor = 1e-6;

GradCheckReport grad_check(const GradCheckRequest& request);

}  // namespace shaspec::cli
