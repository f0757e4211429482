#include "shaspec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "shaspec/binary_io.hpp"
#include "shaspec/config.hpp"

namespace shaspec {

namespace {

constexpr std::uint64_t kMaskSalt = 0x6d61736b;
constexpr std::uint64_t kBatchSalt = 0x62617463;
constexpr std::uint64_t kDropoutSalt = 0x64726f70;
constexpr std::uint32_t kCheckpointVersion = 1;

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

Schedule parse_schedule(std::string_view name) {
  if (name == "cosine") return Schedule::cosine;
  if (name == "constant") return Schedule::constant;
  throw ValidationError("unknown schedule '" + std::string(name) + "'");
}

std::string_view schedule_name(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

TrainConfig TrainConfig::defaults_for(TaskKind task) {
  TrainConfig c;
  if (task == TaskKind::segmentation) {
    c.iterations = 8000;
    c.batch_size = 8;
  }
  return c;
}

void TrainConfig::validate() const {
  if (iterations == 0) throw ValidationError("iterations must be positive");
  if (batch_size == 0) throw ValidationError("batch_size must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be positive");
  if (log_interval == 0) throw ValidationError("log_interval must be positive");
  if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
  if (!(optimizer.weight_decay >= 0.0)) throw ValidationError("weight_decay must be non-negative");
  weights.validate();
}

double TrainConfig::lr_at(std::size_t k) const {
  if (schedule == Schedule::constant) return lr;
  return cosine_lr(static_cast<std::int64_t>(k), static_cast<std::int64_t>(iterations), lr);
}

std::string metrics_header() { return "iter,lr,loss_task,loss_dao,loss_dco,loss_total"; }

std::string format_metrics_row(const LogRow& r) {
  return std::to_string(r.iter) + "," + g9(r.lr) + "," + g9(r.task) + "," + g9(r.dao) + "," + g9(r.dco) + "," +
         g9(r.total);
}

ModelConfig model_config_for(const Dataset& data, ModelConfig base) {
  base.task = data.task;
  base.modality_count = data.modality_count;
  base.input_shapes.clear();
  for (std::size_t i = 0; i < data.modality_count; ++i) base.input_shapes.push_back(data.modality_shape(i));
  base.class_count = data.class_count();
  return base;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(ShaSpecModel& model, const Dataset& data, TrainConfig config)
    : model_(model), data_(data), config_(std::move(config)), optimizer_(config_.optimizer, model.parameters()) {
  config_.validate();
  config_.availability.validate(model.modality_count());
  if (data.task != model.task()) throw ValidationError("dataset task does not match the model");
  if (data.modality_count != model.modality_count())
    throw DimensionError("dataset has " + std::to_string(data.modality_count) + " modalities, model expects " +
                         std::to_string(model.modality_count()));
  if (data.size() == 0) throw ValidationError("empty training set");
}

ModalityMask Trainer::mask_at(std::size_t k) const {
  Rng rng(derive_seed(config_.seed, k, kMaskSalt));
  return draw_mask(config_.availability, model_.modality_count(), rng);
}

std::vector<std::size_t> Trainer::draw_batch(const ModalityMask& mask, std::size_t k) {
  auto& pool = candidates_[mask.flags()];
  if (pool.empty()) {
    for (std::size_t j = 0; j < data_.size(); ++j) {
      const auto& m = data_.samples[j].mask;
      bool ok = true;
      for (std::size_t i = 0; i < mask.size(); ++i) ok = ok && (!mask[i] || m[i]);
      if (ok) pool.push_back(j);
    }
    if (pool.empty()) throw ValidationError("no training sample provides modalities " + mask.bits());
  }
  Rng rng(derive_seed(config_.seed, k, kBatchSalt));
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<std::size_t> idx(config_.batch_size);
  for (auto& i : idx) i = pool[pick(rng)];
  return idx;
}

LogRow Trainer::step() {
  const std::size_t k = iteration_;
  LogRow row;
  row.iter = k + 1;
  row.lr = config_.lr_at(k);
  const auto mask = mask_at(k);
  const auto idx = draw_batch(mask, k);
  const auto batch = Batch::from_dataset(data_, idx, mask);

  model_.zero_grad();
  Tape tape;
  auto diagnose = [&](const std::string& what) {
    return TrainingAborted("training aborted at iteration " + std::to_string(row.iter) + " (mask " + mask.bits() +
                           "): " + what + "; loss_task=" + g9(row.task) + " loss_dao=" + g9(row.dao) +
                           " loss_dco=" + g9(row.dco));
  };
  row.task = row.dao = row.dco = std::nan("");
  try {
    const auto result = model_.forward(tape, batch, {true, derive_seed(config_.seed, k, kDropoutSalt)});
    const auto terms = total_loss(tape, model_, result, batch, config_.weights, model_.config().dao);
    row.task = terms.task.value().item();
    row.dao = terms.dao.value().item();
    row.dco = terms.dco.value().item();
    row.total = terms.total.value().item();
    tape.backward(terms.total);
  } catch (const NumericalError& e) {
    throw diagnose(e.what());
  }

  const auto used = tape.parameters();
  const auto& params = optimizer_.params();
  std::vector<bool> active(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    active[p] = std::find(used.begin(), used.end(), params[p]) != used.end();
    if (active[p] && !params[p]->grad.all_finite()) throw diagnose("non-finite gradient for " + params[p]->name);
  }
  optimizer_.step(row.lr, active);
  for (std::size_t p = 0; p < params.size(); ++p)
    if (active[p] && !params[p]->value.all_finite()) throw diagnose("non-finite value in " + params[p]->name);
  ++iteration_;
  return row;
}

void Trainer::resume(const OptimizerState& state, std::size_t iteration) {
  if (iteration > config_.iterations) throw ValidationError("checkpoint iteration beyond the configured run");
  optimizer_.restore(state);
  iteration_ = iteration;
}

void Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, model_, optimizer_.state(), iteration_, config_);
}

std::vector<LogRow> Trainer::run(const std::function<void(const LogRow&)>& on_log) {
  std::vector<LogRow> rows;
  std::ofstream csv;
  const bool to_disk = !config_.output_dir.empty();
  if (to_disk) {
    std::filesystem::create_directories(config_.output_dir);
    const auto path = config_.output_dir / "metrics.csv";
    // Keep rows up to the resume point so the log stays append-only.
    std::string kept = metrics_header() + "\n";
    if (iteration_ > 0) {
      std::ifstream in(path);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        if (std::stoull(line.substr(0, comma)) <= iteration_) kept += line + "\n";
      }
    }
    csv.open(path, std::ios::trunc);
    if (!csv) throw IoError("cannot write '" + path.string() + "'");
    csv << kept;
  }
  while (iteration_ < config_.iterations) {
    const auto row = step();
    if (iteration_ % config_.log_interval == 0 || iteration_ == config_.iterations) {
      rows.push_back(row);
      if (on_log) on_log(row);
      if (to_disk) csv << format_metrics_row(row) << "\n" << std::flush;
    }
    if (to_disk && config_.checkpoint_interval && iteration_ % config_.checkpoint_interval == 0 &&
        iteration_ != config_.iterations)
      save(config_.output_dir / "checkpoint.shsp");
  }
  if (to_disk) save(config_.output_dir / "checkpoint.shsp");
  return rows;
}

std::vector<LogRow> train(ShaSpecModel& model, const Dataset& data, const TrainConfig& config) {
  Trainer t(model, data, config);
  return t.run();
}

std::vector<LogRow> train_dedicated(ShaSpecModel& model, const Dataset& data, const TrainConfig& config) {
  if (config.availability.mode != AvailabilityMode::fixed_mask || !config.availability.mask)
    throw ValidationError("dedicated training needs a fixed evaluation mask");
  return train(model, data, config);
}

// ---------------------------------------------------------------------------

namespace {

void named_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name.data(), name.size());
  w.tensor(t);
}

std::vector<std::pair<std::string, Tensor>> read_named_tensors(ByteReader& r) {
  const auto count = r.u32();
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.u16();
    auto name = r.string(len);
    out.emplace_back(std::move(name), r.tensor());
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ShaSpecModel& model, const OptimizerState& opt,
                                            std::uint64_t iteration, const TrainConfig& train) {
  ByteWriter w;
  w.raw("SHSP", 4);
  w.u32(kCheckpointVersion);
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.u16(static_cast<std::uint16_t>(p->name.size()));
    w.raw(p->name.data(), p->name.size());
    w.tensor(p->value);
  }
  const bool adam = opt.config.kind == OptimizerKind::adam;
  const std::size_t buffers = opt.first.size() + (adam ? opt.second.size() : 0);
  w.u32(static_cast<std::uint32_t>(1 + buffers));
  named_tensor(w, "step_count", Tensor::scalar(static_cast<double>(opt.step_count)));
  for (std::size_t k = 0; k < opt.first.size(); ++k) named_tensor(w, "first/" + params[k]->name, opt.first[k]);
  if (adam)
    for (std::size_t k = 0; k < opt.second.size(); ++k) named_tensor(w, "second/" + params[k]->name, opt.second[k]);
  w.u64(iteration);
  KeyValues snapshot = to_key_values(model.config());
  snapshot.merge(to_key_values(train));
  const auto text = format_config_text(snapshot);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  return w.bytes();
}

void save_checkpoint(const std::filesystem::path& path, const ShaSpecModel& model, const OptimizerState& optimizer,
                     std::uint64_t iteration, const TrainConfig& train) {
  ByteWriter w;
  const auto bytes = encode_checkpoint(model, optimizer, iteration, train);
  w.raw(bytes.data(), bytes.size());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  w.save(path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = ByteReader::load(path);
  r.expect_magic("SHSP");
  if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(v));
  const auto params_at = r.offset();
  const auto params = read_named_tensors(r);
  const auto opt_at = r.offset();
  const auto buffers = read_named_tensors(r);
  const auto iteration = r.u64();
  const auto text_len = r.u32();
  const auto text_at = r.offset();
  const auto text = r.string(text_len);
  if (!r.at_end()) r.fail("trailing bytes after the configuration snapshot");

  KeyValues config;
  ModelConfig mc;
  TrainConfig tc;
  try {
    config = parse_config_text(text, "checkpoint");
    apply_config(config, mc);
    tc = TrainConfig::defaults_for(mc.task);
    apply_config(config, tc);
  } catch (const ValidationError& e) {
    throw FormatError(std::string("bad configuration snapshot: ") + e.what(), text_at);
  }
  std::optional<ShaSpecModel> model;
  try {
    model.emplace(mc);
  } catch (const std::exception& e) {
    throw FormatError(std::string("configuration snapshot does not describe a model: ") + e.what(), text_at);
  }
  auto model_params = model->parameters();
  if (model_params.size() != params.size())
    throw FormatError("checkpoint holds " + std::to_string(params.size()) + " tensors, model needs " +
                      std::to_string(model_params.size()),
                      params_at);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].first != model_params[k]->name || params[k].second.shape() != model_params[k]->value.shape())
      throw FormatError("tensor '" + params[k].first + "' does not match model parameter '" + model_params[k]->name +
                            "'",
                        params_at);
    model_params[k]->value = params[k].second;
  }

  OptimizerState state;
  state.config = tc.optimizer;
  const bool adam = state.config.kind == OptimizerKind::adam;
  const std::size_t expected = 1 + model_params.size() * (adam ? 2 : 1);
  if (buffers.size() != expected || buffers[0].first != "step_count")
    throw FormatError("optimizer block has " + std::to_string(buffers.size()) + " tensors, expected " +
                          std::to_string(expected),
                      opt_at);
  state.step_count = static_cast<std::uint64_t>(buffers[0].second.item());
  for (std::size_t k = 0; k < model_params.size(); ++k) {
    const auto& first = buffers[1 + k];
    if (first.first != "first/" + model_params[k]->name || first.second.shape() != model_params[k]->value.shape())
      throw FormatError("optimizer buffer '" + first.first + "' does not match", opt_at);
    state.first.push_back(first.second);
    if (adam) {
      const auto& second = buffers[1 + model_params.size() + k];
      if (second.first != "second/" + model_params[k]->name || second.second.shape() != model_params[k]->value.shape())
        throw FormatError("optimizer buffer '" + second.first + "' does not match", opt_at);
      state.second.push_back(second.second);
    }
  }
  return {std::move(*model), std::move(state), iteration, std::move(config)};
}

}  // namespace shaspec
