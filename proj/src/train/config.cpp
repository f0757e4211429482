#include "shaspec/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "shaspec/binary_io.hpp"

namespace shaspec {

namespace {

constexpr std::array kKnownKeys = {
    "data.task", "data.modalities", "data.seed", "data.train_samples", "data.test_samples", "data.input_dim",
    "data.shared_latent_dim", "data.specific_latent_dim", "data.classes", "data.class_separation",
    "data.specific_scale", "data.noise", "data.image_size", "data.min_area", "data.max_area", "data.texture",
    "model.task", "model.modalities", "model.input_shapes", "model.classes", "model.stem_size",
    "model.encoder_hidden", "model.feature_dim", "model.decoder_hidden", "model.dropout", "model.channels1",
    "model.channels2", "model.activation", "model.dao", "model.kl_dim", "model.imputation", "model.seed",
    "train.iterations", "train.batch_size", "train.optimizer", "train.momentum", "train.beta1", "train.beta2",
    "train.epsilon", "train.weight_decay", "train.lr", "train.schedule", "train.alpha", "train.beta",
    "train.availability", "train.rates", "train.mask", "train.seed", "train.checkpoint_interval",
    "train.log_interval", "eval.subsets", "eval.smooth"};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("invalid value '" + value + "' for " + key + " (expected " + expected + ")");
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) bad_value(key, v, "a non-negative integer");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.emplace_back(trim(cur));
  return out;
}

template <class Fn>
void with(const KeyValues& kv, const char* key, Fn&& fn) {
  if (auto it = kv.find(key); it != kv.end()) {
    try {
      fn(it->second);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string(key) + ": " + e.what());
    }
  }
}

}  // namespace

bool is_known_key(std::string_view key) {
  return std::find(kKnownKeys.begin(), kKnownKeys.end(), key) != kKnownKeys.end();
}

void check_known_keys(const KeyValues& kv, std::string_view source) {
  for (const auto& [k, v] : kv)
    if (!is_known_key(k)) throw ConfigError(std::string(source) + ": unknown key '" + k + "'");
}

KeyValues parse_config_text(std::string_view text, std::string_view source) {
  KeyValues kv;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!is_known_key(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!kv.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string format_config_text(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------

void apply_config(const KeyValues& kv, SynthSpec& s) {
  with(kv, "data.task", [&](const std::string& v) { s.task = parse_task_kind(v); });
  with(kv, "data.modalities", [&](const std::string& v) { s.modality_count = to_uint("data.modalities", v); });
  with(kv, "data.seed", [&](const std::string& v) { s.seed = to_uint("data.seed", v); });
  with(kv, "data.input_dim", [&](const std::string& v) { s.input_dim = to_uint("data.input_dim", v); });
  with(kv, "data.shared_latent_dim",
       [&](const std::string& v) { s.shared_latent_dim = to_uint("data.shared_latent_dim", v); });
  with(kv, "data.specific_latent_dim",
       [&](const std::string& v) { s.specific_latent_dim = to_uint("data.specific_latent_dim", v); });
  with(kv, "data.classes", [&](const std::string& v) { s.class_count = to_uint("data.classes", v); });
  with(kv, "data.class_separation",
       [&](const std::string& v) { s.class_separation = to_double("data.class_separation", v); });
  with(kv, "data.specific_scale", [&](const std::string& v) { s.specific_scale = to_double("data.specific_scale", v); });
  with(kv, "data.noise", [&](const std::string& v) { s.noise = to_double("data.noise", v); });
  with(kv, "data.image_size", [&](const std::string& v) { s.image_size = to_uint("data.image_size", v); });
  with(kv, "data.min_area", [&](const std::string& v) { s.min_area = to_uint("data.min_area", v); });
  with(kv, "data.max_area", [&](const std::string& v) { s.max_area = to_uint("data.max_area", v); });
  with(kv, "data.texture", [&](const std::string& v) { s.texture = to_double("data.texture", v); });
}

KeyValues to_key_values(const SynthSpec& s) {
  return {{"data.task", std::string(task_kind_name(s.task))},
          {"data.modalities", std::to_string(s.modality_count)},
          {"data.seed", std::to_string(s.seed)},
          {"data.input_dim", std::to_string(s.input_dim)},
          {"data.shared_latent_dim", std::to_string(s.shared_latent_dim)},
          {"data.specific_latent_dim", std::to_string(s.specific_latent_dim)},
          {"data.classes", std::to_string(s.class_count)},
          {"data.class_separation", fmt(s.class_separation)},
          {"data.specific_scale", fmt(s.specific_scale)},
          {"data.noise", fmt(s.noise)},
          {"data.image_size", std::to_string(s.image_size)},
          {"data.min_area", std::to_string(s.min_area)},
          {"data.max_area", std::to_string(s.max_area)},
          {"data.texture", fmt(s.texture)}};
}

void apply_config(const KeyValues& kv, ModelConfig& m) {
  with(kv, "model.task", [&](const std::string& v) { m.task = parse_task_kind(v); });
  with(kv, "model.modalities", [&](const std::string& v) { m.modality_count = to_uint("model.modalities", v); });
  with(kv, "model.input_shapes", [&](const std::string& v) {
    m.input_shapes.clear();
    for (const auto& part : split(v, ';')) {
      Shape s;
      for (const auto& d : split(part, 'x')) s.push_back(to_uint("model.input_shapes", d));
      m.input_shapes.push_back(s);
    }
  });
  with(kv, "model.classes", [&](const std::string& v) { m.class_count = to_uint("model.classes", v); });
  with(kv, "model.stem_size", [&](const std::string& v) { m.stem_size = to_uint("model.stem_size", v); });
  with(kv, "model.encoder_hidden", [&](const std::string& v) { m.encoder_hidden = to_uint("model.encoder_hidden", v); });
  with(kv, "model.feature_dim", [&](const std::string& v) { m.feature_dim = to_uint("model.feature_dim", v); });
  with(kv, "model.decoder_hidden", [&](const std::string& v) { m.decoder_hidden = to_uint("model.decoder_hidden", v); });
  with(kv, "model.dropout", [&](const std::string& v) { m.dropout = to_double("model.dropout", v); });
  with(kv, "model.channels1", [&](const std::string& v) { m.channels1 = to_uint("model.channels1", v); });
  with(kv, "model.channels2", [&](const std::string& v) { m.channels2 = to_uint("model.channels2", v); });
  with(kv, "model.activation", [&](const std::string& v) { m.activation = parse_activation(v); });
  with(kv, "model.dao", [&](const std::string& v) { m.dao = DaoVariant::parse(v); });
  with(kv, "model.kl_dim", [&](const std::string& v) { m.kl_projection_dim = to_uint("model.kl_dim", v); });
  with(kv, "model.imputation", [&](const std::string& v) { m.imputation = parse_imputation(v); });
  with(kv, "model.seed", [&](const std::string& v) { m.seed = to_uint("model.seed", v); });
}

KeyValues to_key_values(const ModelConfig& m) {
  std::string shapes;
  for (std::size_t i = 0; i < m.input_shapes.size(); ++i) {
    if (i) shapes += ";";
    for (std::size_t k = 0; k < m.input_shapes[i].size(); ++k) {
      if (k) shapes += "x";
      shapes += std::to_string(m.input_shapes[i][k]);
    }
  }
  return {{"model.task", std::string(task_kind_name(m.task))},
          {"model.modalities", std::to_string(m.modality_count)},
          {"model.input_shapes", shapes},
          {"model.classes", std::to_string(m.class_count)},
          {"model.stem_size", std::to_string(m.stem_size)},
          {"model.encoder_hidden", std::to_string(m.encoder_hidden)},
          {"model.feature_dim", std::to_string(m.feature_dim)},
          {"model.decoder_hidden", std::to_string(m.decoder_hidden)},
          {"model.dropout", fmt(m.dropout)},
          {"model.channels1", std::to_string(m.channels1)},
          {"model.channels2", std::to_string(m.channels2)},
          {"model.activation", std::string(activation_name(m.activation))},
          {"model.dao", m.dao.name()},
          {"model.kl_dim", std::to_string(m.kl_projection_dim)},
          {"model.imputation", std::string(imputation_name(m.imputation))},
          {"model.seed", std::to_string(m.seed)}};
}

void apply_config(const KeyValues& kv, TrainConfig& t) {
  with(kv, "train.iterations", [&](const std::string& v) { t.iterations = to_uint("train.iterations", v); });
  with(kv, "train.batch_size", [&](const std::string& v) { t.batch_size = to_uint("train.batch_size", v); });
  with(kv, "train.optimizer", [&](const std::string& v) {
    const auto kind = parse_optimizer_kind(v);
    if (kind != t.optimizer.kind)
      t.optimizer = kind == OptimizerKind::adam ? OptimizerConfig::adam() : OptimizerConfig::nesterov();
  });
  with(kv, "train.momentum", [&](const std::string& v) { t.optimizer.momentum = to_double("train.momentum", v); });
  with(kv, "train.beta1", [&](const std::string& v) { t.optimizer.beta1 = to_double("train.beta1", v); });
  with(kv, "train.beta2", [&](const std::string& v) { t.optimizer.beta2 = to_double("train.beta2", v); });
  with(kv, "train.epsilon", [&](const std::string& v) { t.optimizer.epsilon = to_double("train.epsilon", v); });
  with(kv, "train.weight_decay",
       [&](const std::string& v) { t.optimizer.weight_decay = to_double("train.weight_decay", v); });
  with(kv, "train.lr", [&](const std::string& v) { t.lr = to_double("train.lr", v); });
  with(kv, "train.schedule", [&](const std::string& v) { t.schedule = parse_schedule(v); });
  with(kv, "train.alpha", [&](const std::string& v) { t.weights.alpha = to_double("train.alpha", v); });
  with(kv, "train.beta", [&](const std::string& v) { t.weights.beta = to_double("train.beta", v); });
  with(kv, "train.availability", [&](const std::string& v) { t.availability.mode = parse_availability_mode(v); });
  with(kv, "train.rates", [&](const std::string& v) {
    t.availability.rates.clear();
    for (const auto& r : split(v, ',')) t.availability.rates.push_back(to_double("train.rates", r));
  });
  with(kv, "train.mask", [&](const std::string& v) { t.availability.mask = ModalityMask::from_bits(v); });
  with(kv, "train.seed", [&](const std::string& v) { t.seed = to_uint("train.seed", v); });
  with(kv, "train.checkpoint_interval",
       [&](const std::string& v) { t.checkpoint_interval = to_uint("train.checkpoint_interval", v); });
  with(kv, "train.log_interval", [&](const std::string& v) { t.log_interval = to_uint("train.log_interval", v); });
}

KeyValues to_key_values(const TrainConfig& t) {
  KeyValues kv{{"train.iterations", std::to_string(t.iterations)},
               {"train.batch_size", std::to_string(t.batch_size)},
               {"train.optimizer", std::string(optimizer_kind_name(t.optimizer.kind))},
               {"train.momentum", fmt(t.optimizer.momentum)},
               {"train.beta1", fmt(t.optimizer.beta1)},
               {"train.beta2", fmt(t.optimizer.beta2)},
               {"train.epsilon", fmt(t.optimizer.epsilon)},
               {"train.weight_decay", fmt(t.optimizer.weight_decay)},
               {"train.lr", fmt(t.lr)},
               {"train.schedule", std::string(schedule_name(t.schedule))},
               {"train.alpha", fmt(t.weights.alpha)},
               {"train.beta", fmt(t.weights.beta)},
               {"train.availability", std::string(availability_mode_name(t.availability.mode))},
               {"train.seed", std::to_string(t.seed)},
               {"train.checkpoint_interval", std::to_string(t.checkpoint_interval)},
               {"train.log_interval", std::to_string(t.log_interval)}};
  if (!t.availability.rates.empty()) {
    std::string r;
    for (std::size_t i = 0; i < t.availability.rates.size(); ++i) r += (i ? "," : "") + fmt(t.availability.rates[i]);
    kv["train.rates"] = r;
  }
  if (t.availability.mask) kv["train.mask"] = t.availability.mask->bits();
  return kv;
}

}  // namespace shaspec
