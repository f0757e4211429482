#pragma once

#include <map>
#include <string>
#include <string_view>

#include "shaspec/model.hpp"
#include "shaspec/synth.hpp"
#include "shaspec/trainer.hpp"

namespace shaspec {

/// Invalid configuration text or value.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Flat dotted-key configuration. Ordered so snapshots are deterministic.
using KeyValues = std::map<std::string, std::string>;

/// `key = value` per line, '#' starts a comment, blank lines ignored.
/// Duplicate keys, malformed lines and unknown keys raise ConfigError naming
/// `source`, the line and the key.
KeyValues parse_config_text(std::string_view text, std::string_view source = "<config>");
KeyValues load_config_file(const std::string& path);
std::string format_config_text(const KeyValues& kv);

/// Every key the configuration grammar accepts.
bool is_known_key(std::string_view key);
void check_known_keys(const KeyValues& kv, std::string_view source = "<config>");

/// Overlays `kv` onto the target; only keys present in `kv` change.
void apply_config(const KeyValues& kv, SynthSpec& spec);
void apply_config(const KeyValues& kv, ModelConfig& model);
void apply_config(const KeyValues& kv, TrainConfig& train);

KeyValues to_key_values(const SynthSpec& spec);
KeyValues to_key_values(const ModelConfig& model);
KeyValues to_key_values(const TrainConfig& train);

}  // namespace shaspec
