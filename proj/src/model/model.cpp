#include "shaspec/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "shaspec/rng.hpp"

namespace shaspec {

namespace O = ops;

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ValidationError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

ImputationMode parse_imputation(std::string_view name) {
  if (name == "mean") return ImputationMode::mean;
  if (name == "zero") return ImputationMode::zero;
  throw ValidationError("unknown imputation mode '" + std::string(name) + "'");
}

std::string_view imputation_name(ImputationMode m) { return m == ImputationMode::mean ? "mean" : "zero"; }

DaoVariant DaoVariant::parse(std::string_view name) {
  if (name == "ce") return {DaoKind::ce_uniform, O::PNorm::l1};
  if (name == "kl") return {DaoKind::kl_pairwise, O::PNorm::l1};
  return {DaoKind::pnorm, O::parse_pnorm(name)};
}

std::string DaoVariant::name() const {
  switch (kind) {
    case DaoKind::ce_uniform: return "ce";
    case DaoKind::kl_pairwise: return "kl";
    case DaoKind::pnorm: return std::string(O::pnorm_name(p));
  }
  return "?";
}

void ModelConfig::validate() const {
  if (modality_count < 2) throw ValidationError("model needs at least two modalities");
  if (input_shapes.size() != modality_count) throw ValidationError("one input shape per modality is required");
  if (class_count < 2) throw ValidationError("class_count must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
  if (feature_dim == 0 || encoder_hidden == 0 || decoder_hidden == 0 || channels1 == 0 || channels2 == 0 ||
      kl_projection_dim == 0)
    throw ValidationError("layer sizes must be positive");
  for (const auto& s : input_shapes) {
    if (task == TaskKind::classification && s.size() != 1)
      throw DimensionError("classification inputs must be vectors, got " + shape_to_string(s));
    if (task == TaskKind::segmentation) {
      if (s.size() != 3) throw DimensionError("segmentation inputs must be C x H x W, got " + shape_to_string(s));
      if (s[1] != input_shapes[0][1] || s[2] != input_shapes[0][2])
        throw DimensionError("segmentation modalities must share spatial size");
      if (s[1] % 2 || s[2] % 2) throw DimensionError("segmentation spatial size must be even");
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

Tensor stack(const std::vector<const Tensor*>& parts) {
  Shape shape{parts.size()};
  const Shape& inner = parts.front()->shape();
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const std::size_t n = parts.front()->size();
  for (std::size_t b = 0; b < parts.size(); ++b) {
    if (parts[b]->shape() != inner)
      throw DimensionError("batch inputs disagree: " + shape_to_string(parts[b]->shape()) + " vs " +
                           shape_to_string(inner));
    std::copy_n(parts[b]->data().begin(), n, out.data().begin() + static_cast<long>(b * n));
  }
  return out;
}

}  // namespace

Batch Batch::from_samples(std::span<const ModalitySample* const> samples, const ModalityMask& mask) {
  if (samples.empty()) throw ContractError("empty batch");
  Batch batch;
  batch.mask = mask;
  batch.size = samples.size();
  batch.inputs.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    std::vector<const Tensor*> parts;
    for (const auto* s : samples) {
      if (s->inputs.size() != mask.size()) throw DimensionError("sample modality count differs from mask");
      if (!s->inputs[i]) throw ContractError("mask requests modality " + std::to_string(i) + " absent from a sample");
      parts.push_back(&*s->inputs[i]);
    }
    batch.inputs[i] = stack(parts);
  }
  if (std::holds_alternative<std::uint32_t>(samples.front()->label)) {
    for (const auto* s : samples) batch.class_labels.push_back(std::get<std::uint32_t>(s->label));
  } else {
    std::vector<const Tensor*> maps;
    for (const auto* s : samples) maps.push_back(&std::get<Tensor>(s->label));
    batch.segmentation_labels = stack(maps);
  }
  return batch;
}

Batch Batch::from_dataset(const Dataset& data, std::span<const std::size_t> indices, const ModalityMask& mask) {
  std::vector<const ModalitySample*> ptrs;
  ptrs.reserve(indices.size());
  for (auto i : indices) ptrs.push_back(&data.samples.at(i));
  return from_samples(ptrs, mask);
}

bool FeatureBundle::complete() const {
  return !fused.empty() && std::all_of(fused.begin(), fused.end(), [](const auto& f) { return f.has_value(); });
}

Var Linear::apply(Tape& tape, Var x) const {
  auto y = O::matmul(x, tape.param(*weight));
  return bias ? O::add_row_bias(y, tape.param(*bias)) : y;
}

Var Conv::apply(Tape& tape, Var x) const {
  auto y = O::conv2d(x, tape.param(*kernels));
  return bias ? O::add_channel_bias(y, tape.param(*bias)) : y;
}

// ---------------------------------------------------------------------------

ShaSpecModel::ShaSpecModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t n = config_.modality_count;
  const bool cls = config_.task == TaskKind::classification;
  if (config_.stem_size == 0) config_.stem_size = config_.input_shapes[0][0];

  Rng rng(derive_seed(config_.seed, 0, 0x5eed));
  auto build = [&](std::vector<Parameter*>& group, auto&& fn) {
    const std::size_t first = params_.size();
    fn();
    for (std::size_t k = first; k < params_.size(); ++k) group.push_back(params_[k].get());
  };

  groups_stem_.resize(n);
  stems_lin_.resize(n);
  stems_conv_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t raw = config_.input_shapes[i][0];
    if (raw == config_.stem_size) continue;
    build(groups_stem_[i], [&] {
      const std::string name = "stem." + std::to_string(i);
      if (cls) {
        stems_lin_[i] = make_linear(name, raw, config_.stem_size, true);
      } else {
        stems_conv_[i] = add_param(name + ".w", Shape{config_.stem_size, raw}, 1.0 / std::sqrt(double(raw)));
      }
    });
  }

  build(groups_shared_, [&] { shared_ = make_encoder("shared", config_.stem_size); });
  groups_specific_.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    build(groups_specific_[i],
          [&] { specific_.push_back(make_encoder("specific." + std::to_string(i), config_.input_shapes[i][0])); });

  const std::size_t d = pooled_dim();
  build(groups_proj_, [&] {
    proj_ = cls ? add_param("proj.w", Shape{2 * d, d}, 1.0 / std::sqrt(2.0 * d))
                : add_param("proj.w", Shape{d, 2 * d}, 1.0 / std::sqrt(2.0 * d));
  });

  build(groups_dec_, [&] {
    if (cls) {
      dec_fc1_ = make_linear("dec.fc1", n * d, config_.decoder_hidden, true);
      dec_fc2_ = make_linear("dec.fc2", config_.decoder_hidden, config_.class_count, true);
    } else {
      dec_conv1_ = make_conv("dec.conv1", n * d, config_.channels2);
      dec_conv2_ = make_conv("dec.conv2", config_.channels2, config_.channels1);
      dec_out_ = make_conv("dec.out", config_.channels1, config_.class_count);
    }
  });

  build(groups_dao_, [&] {
    if (config_.dao.kind == DaoKind::ce_uniform) dao_head_ = make_linear("dao", d, n, true);
    if (config_.dao.kind == DaoKind::kl_pairwise) dao_head_ = make_linear("dao", d, config_.kl_projection_dim, false);
  });
  build(groups_dco_, [&] { dco_head_ = make_linear("dco", d, n, true); });

  // Fan-in uniform initialization, biases zero.
  for (auto& p : params_) {
    if (p->name.ends_with(".b")) continue;
    std::size_t fan_in = 1;
    const auto& s = p->value.shape();
    if (s.size() == 4) fan_in = s[1] * 9;                                   // conv kernels
    else if (p->name.starts_with("stem.") && !cls) fan_in = s[1];           // channel stems
    else if (p->name == "proj.w") fan_in = 2 * d;
    else fan_in = s[0];                                                     // [in x out]
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : p->value.data()) v = u(rng);
  }
}

ShaSpecModel ShaSpecModel::clone() const {
  ShaSpecModel copy(config_);
  for (std::size_t k = 0; k < params_.size(); ++k) copy.params_[k]->value = params_[k]->value;
  return copy;
}

std::size_t ShaSpecModel::pooled_dim() const {
  return config_.task == TaskKind::classification ? config_.feature_dim : config_.channels2;
}

Parameter* ShaSpecModel::add_param(std::string name, Shape shape, double) {
  params_.push_back(std::make_unique<Parameter>(std::move(name), Tensor(std::move(shape))));
  return params_.back().get();
}

Linear ShaSpecModel::make_linear(const std::string& name, std::size_t in, std::size_t out, bool bias) {
  Linear l;
  l.weight = add_param(name + ".w", Shape{in, out}, 0.0);
  if (bias) l.bias = add_param(name + ".b", Shape{out}, 0.0);
  return l;
}

Conv ShaSpecModel::make_conv(const std::string& name, std::size_t in, std::size_t out) {
  Conv c;
  c.kernels = add_param(name + ".w", Shape{out, in, 3, 3}, 0.0);
  c.bias = add_param(name + ".b", Shape{out}, 0.0);
  return c;
}

Encoder ShaSpecModel::make_encoder(const std::string& name, std::size_t in) {
  Encoder e;
  if (config_.task == TaskKind::classification) {
    e.fc1 = make_linear(name + ".fc1", in, config_.encoder_hidden, true);
    e.fc2 = make_linear(name + ".fc2", config_.encoder_hidden, config_.feature_dim, true);
  } else {
    e.conv1 = make_conv(name + ".conv1", in, config_.channels1);
    e.conv2 = make_conv(name + ".conv2", config_.channels1, config_.channels2);
  }
  return e;
}

std::vector<Parameter*> ShaSpecModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ShaSpecModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ShaSpecModel::group(ParamGroup g, std::optional<std::size_t> modality) {
  switch (g) {
    case ParamGroup::stem: return groups_stem_.at(modality.value());
    case ParamGroup::specific: return groups_specific_.at(modality.value());
    case ParamGroup::shared: return groups_shared_;
    case ParamGroup::projection: return groups_proj_;
    case ParamGroup::decoder: return groups_dec_;
    case ParamGroup::dao: return groups_dao_;
    case ParamGroup::dco: return groups_dco_;
  }
  return {};
}

Parameter& ShaSpecModel::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

void ShaSpecModel::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

Var ShaSpecModel::activate(Var x) const {
  return config_.activation == Activation::relu ? O::relu(x) : O::tanh(x);
}

Var ShaSpecModel::run_encoder(Tape& tape, const Encoder& enc, Var x) const {
  if (config_.task == TaskKind::classification) return enc.fc2.apply(tape, activate(enc.fc1.apply(tape, x)));
  return enc.conv2.apply(tape, O::avg_pool2(activate(enc.conv1.apply(tape, x))));
}

Var ShaSpecModel::stem_input(Tape& tape, std::size_t modality, const Tensor& x) {
  auto v = tape.constant(x);
  if (stems_lin_[modality]) return stems_lin_[modality]->apply(tape, v);
  if (stems_conv_[modality]) return O::channel_linear(v, tape.param(**stems_conv_[modality]));
  return v;
}

FeatureBundle ShaSpecModel::encode(Tape& tape, const Batch& batch) {
  const std::size_t n = modality_count();
  if (batch.mask.size() != n || batch.inputs.size() != n)
    throw DimensionError("batch has " + std::to_string(batch.inputs.size()) + " modalities, model expects " +
                         std::to_string(n));
  FeatureBundle bundle;
  bundle.mask = batch.mask;
  bundle.shared.resize(n);
  bundle.specific.resize(n);
  bundle.fused.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!batch.mask[i]) continue;
    if (!batch.inputs[i]) throw ContractError("modality " + std::to_string(i) + " marked available but has no input");
    const Tensor& x = *batch.inputs[i];
    Shape expected{batch.size};
    expected.insert(expected.end(), config_.input_shapes[i].begin(), config_.input_shapes[i].end());
    if (x.shape() != expected)
      throw DimensionError("modality " + std::to_string(i) + " input " + shape_to_string(x.shape()) + ", expected " +
                           shape_to_string(expected));
    bundle.shared[i] = run_encoder(tape, shared_, stem_input(tape, i, x));
    bundle.specific[i] = run_encoder(tape, specific_[i], tape.constant(x));
  }
  return bundle;
}

void ShaSpecModel::fuse(Tape& tape, FeatureBundle& bundle) {
  auto proj = tape.param(*proj_);
  for (std::size_t i = 0; i < modality_count(); ++i) {
    if (!bundle.mask[i]) continue;
    if (!bundle.shared[i] || !bundle.specific[i])
      throw ContractError("fuse: modality " + std::to_string(i) + " lacks a shared/specific pair");
    const Var r = *bundle.shared[i];
    const Var s = *bundle.specific[i];
    Var residual = config_.task == TaskKind::classification ? O::matmul(O::concat_cols({r, s}), proj)
                                                            : O::channel_linear(O::concat_channels({r, s}), proj);
    bundle.fused[i] = O::add(residual, r);
  }
}

Var ShaSpecModel::decode(Tape& tape, const FeatureBundle& bundle, const ForwardOptions& opts) {
  if (bundle.fused.size() != modality_count() || !bundle.complete())
    throw ContractError("decode needs a fused feature for every modality");
  std::vector<Var> parts;
  for (const auto& f : bundle.fused) parts.push_back(*f);
  if (config_.task == TaskKind::classification) {
    auto h = activate(dec_fc1_.apply(tape, O::concat_cols(parts)));
    if (opts.training && config_.dropout > 0.0) {
      Rng rng(derive_seed(opts.dropout_seed, 0, 0xd20f));
      const double keep = 1.0 - config_.dropout;
      Tensor mask(h.shape());
      for (auto& v : mask.data()) v = uniform01(rng) < keep ? 1.0 / keep : 0.0;
      h = O::mul_const(h, mask);
    }
    return dec_fc2_.apply(tape, h);
  }
  auto h = activate(dec_conv1_.apply(tape, O::concat_channels(parts)));
  h = activate(dec_conv2_.apply(tape, O::upsample2(h)));
  return dec_out_.apply(tape, h);
}

ForwardResult ShaSpecModel::forward(Tape& tape, const Batch& batch, const ForwardOptions& opts) {
  auto bundle = encode(tape, batch);
  fuse(tape, bundle);
  impute_missing(tape, bundle, batch.mask, config_.imputation);
  auto pred = decode(tape, bundle, opts);
  return {pred, std::move(bundle)};
}

Var ShaSpecModel::pool(Var feature) const {
  return feature.value().rank() == 4 ? O::global_avg_pool(feature) : feature;
}

Var ShaSpecModel::dco_logits(Tape& tape, Var pooled_specific) { return dco_head_.apply(tape, pooled_specific); }

Var ShaSpecModel::dao_logits(Tape& tape, Var pooled_shared) {
  if (!dao_head_) throw ContractError("the p-norm alignment objective has no head");
  return dao_head_->apply(tape, pooled_shared);
}

void impute_missing(Tape& tape, FeatureBundle& bundle, const ModalityMask& mask, ImputationMode mode) {
  const auto available = mask.available_indices();
  if (available.empty()) throw ContractError("impute_missing: no available modality");
  if (bundle.fused.size() != mask.size()) bundle.fused.resize(mask.size());
  const auto missing = mask.missing_indices();
  if (missing.empty()) return;

  std::vector<Var> shared;
  for (auto i : available) {
    if (i >= bundle.shared.size() || !bundle.shared[i])
      throw ContractError("impute_missing: shared feature of available modality " + std::to_string(i) + " is absent");
    shared.push_back(*bundle.shared[i]);
    if (shared.back().shape() != shared.front().shape())
      throw DimensionError("impute_missing: shared features differ in shape");
  }
  Var generated;
  if (mode == ImputationMode::mean) {
    Var acc = shared.front();
    for (std::size_t k = 1; k < shared.size(); ++k) acc = O::add(acc, shared[k]);
    generated = O::scale(acc, 1.0 / static_cast<double>(shared.size()));
  } else {
    generated = tape.constant(Tensor(shared.front().shape()));
  }
  for (auto n : missing) bundle.fused[n] = generated;
}

}  // namespace shaspec
