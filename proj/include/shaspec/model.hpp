#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shaspec/dataset.hpp"
#include "shaspec/ops.hpp"

namespace shaspec {

enum class Activation { relu, tanh };
Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

/// How the fused feature of a missing modality is produced: the mean of the
/// available shared features, or zeros (the plain concatenation baseline).
enum class ImputationMode { mean, zero };
ImputationMode parse_imputation(std::string_view name);
std::string_view imputation_name(ImputationMode m);

/// Distribution-alignment objective family. The model needs it to size the
/// alignment head.
enum class DaoKind { ce_uniform, kl_pairwise, pnorm };

struct DaoVariant {
  DaoKind kind = DaoKind::pnorm;
  ops::PNorm p = ops::PNorm::l1;

  /// Accepts "ce", "kl", "l1", "l2", "mse".
  static DaoVariant parse(std::string_view name);
  std::string name() const;
  friend bool operator==(const DaoVariant&, const DaoVariant&) = default;
};

struct ModelConfig {
  TaskKind task = TaskKind::classification;
  std::size_t modality_count = 3;
  /// Raw per-modality input shapes: {d} for classification, {c, h, w} for
  /// segmentation.
  std::vector<Shape> input_shapes;
  std::size_t class_count = 2;

  /// Common size the shared encoder consumes. Modalities whose raw size
  /// already equals it use an identity stem; 0 means "size of modality 0".
  std::size_t stem_size = 0;

  // classification
  std::size_t encoder_hidden = 64;
  std::size_t feature_dim = 16;
  std::size_t decoder_hidden = 64;
  double dropout = 0.5;

  // segmentation
  std::size_t channels1 = 8;
  std::size_t channels2 = 16;

  Activation activation = Activation::relu;
  DaoVariant dao;
  std::size_t kl_projection_dim = 8;
  ImputationMode imputation = ImputationMode::mean;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-modality inputs stacked along a leading batch dimension, plus labels.
/// Every sample in a batch shares one mask.
struct Batch {
  ModalityMask mask = ModalityMask::full(1);
  std::size_t size = 0;
  std::vector<std::optional<Tensor>> inputs;
  std::vector<std::uint32_t> class_labels;
  std::optional<Tensor> segmentation_labels;  // [B x H x W] class indices

  /// Stacks the given samples under `mask`. Every modality the mask needs
  /// must be present in every sample; other modalities are dropped.
  static Batch from_samples(std::span<const ModalitySample* const> samples, const ModalityMask& mask);
  static Batch from_dataset(const Dataset& data, std::span<const std::size_t> indices, const ModalityMask& mask);
};

/// Per-modality shared (r), specific (s) and fused (f) features of one batch.
struct FeatureBundle {
  ModalityMask mask = ModalityMask::full(1);
  std::vector<std::optional<Var>> shared;
  std::vector<std::optional<Var>> specific;
  std::vector<std::optional<Var>> fused;

  bool complete() const;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

struct ForwardResult {
  Var prediction;
  FeatureBundle bundle;
};

struct Linear {
  Parameter* weight = nullptr;  // [in x out]
  Parameter* bias = nullptr;    // [out], optional
  Var apply(Tape& tape, Var x) const;
};

struct Conv {
  Parameter* kernels = nullptr;  // [out x in x 3 x 3]
  Parameter* bias = nullptr;     // [out]
  Var apply(Tape& tape, Var x) const;
};

/// Linear -> act -> Linear (classification) or Conv -> act -> pool -> Conv
/// (segmentation).
struct Encoder {
  Linear fc1, fc2;
  Conv conv1, conv2;
};

enum class ParamGroup { stem, shared, specific, projection, decoder, dao, dco };

/// The shared-specific architecture. Owns all parameters; parameter addresses
/// are stable for the lifetime of the model (moves included).
class ShaSpecModel {
 public:
  explicit ShaSpecModel(ModelConfig config);
  ShaSpecModel(ShaSpecModel&&) noexcept = default;
  ShaSpecModel& operator=(ShaSpecModel&&) noexcept = default;
  ShaSpecModel(const ShaSpecModel&) = delete;
  ShaSpecModel& operator=(const ShaSpecModel&) = delete;

  /// Deep copy with identical configuration and parameter values.
  ShaSpecModel clone() const;

  const ModelConfig& config() const { return config_; }
  std::size_t modality_count() const { return config_.modality_count; }
  TaskKind task() const { return config_.task; }
  /// Size of a pooled shared/specific feature (input width of the heads).
  std::size_t pooled_dim() const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  /// Parameters of one group; `modality` selects the copy for stem/specific.
  std::vector<Parameter*> group(ParamGroup g, std::optional<std::size_t> modality = std::nullopt);
  Parameter& parameter(std::string_view name);
  void zero_grad();

  /// Shared and specific features for every available modality.
  FeatureBundle encode(Tape& tape, const Batch& batch);
  /// fused[i] = proj(concat(r_i, s_i)) + r_i for every available i.
  void fuse(Tape& tape, FeatureBundle& bundle);
  /// Class logits [B x K] or per-pixel logits [B x K x H x W].
  Var decode(Tape& tape, const FeatureBundle& bundle, const ForwardOptions& opts);
  /// encode -> fuse -> impute_missing -> decode.
  ForwardResult forward(Tape& tape, const Batch& batch, const ForwardOptions& opts);

  /// Flattens a feature to [B x pooled_dim]: identity for vectors, global
  /// average pooling for maps.
  Var pool(Var feature) const;
  /// Modality classifier on pooled specific features, logits [B x N].
  Var dco_logits(Tape& tape, Var pooled_specific);
  /// Alignment head: logits [B x N] (ce) or projection [B x kl_dim] (kl).
  /// Throws ContractError for the p-norm variant, which has no head.
  Var dao_logits(Tape& tape, Var pooled_shared);

 private:
  Parameter* add_param(std::string name, Shape shape, double bound);
  Linear make_linear(const std::string& name, std::size_t in, std::size_t out, bool bias);
  Conv make_conv(const std::string& name, std::size_t in, std::size_t out);
  Encoder make_encoder(const std::string& name, std::size_t in);
  Var activate(Var x) const;
  Var run_encoder(Tape& tape, const Encoder& enc, Var x) const;
  Var stem_input(Tape& tape, std::size_t modality, const Tensor& x);

  ModelConfig config_;
  std::vector<std::unique_ptr<Parameter>> params_;
  std::vector<std::vector<Parameter*>> groups_stem_;
  std::vector<std::vector<Parameter*>> groups_specific_;
  std::vector<Parameter*> groups_shared_, groups_proj_, groups_dec_, groups_dao_, groups_dco_;

  std::vector<std::optional<Linear>> stems_lin_;
  std::vector<std::optional<Parameter*>> stems_conv_;
  Encoder shared_;
  std::vector<Encoder> specific_;
  Parameter* proj_ = nullptr;  // [2D x D] or [C x 2C]
  Linear dec_fc1_, dec_fc2_;
  Conv dec_conv1_, dec_conv2_, dec_out_;
  std::optional<Linear> dao_head_;
  Linear dco_head_;
};

/// Fills the fused slot of every missing modality. Mean mode uses the
/// arithmetic mean of the available shared features; zero mode uses zeros.
/// Available slots are left untouched.
void impute_missing(Tape& tape, FeatureBundle& bundle, const ModalityMask& mask,
                    ImputationMode mode = ImputationMode::mean);

}  // namespace shaspec
