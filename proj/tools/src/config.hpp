#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "uniicl/backbone.hpp"
#include "uniicl/corpus.hpp"
#include "uniicl/digest.hpp"
#include "uniicl/generator.hpp"
#include "uniicl/selector.hpp"
#include "uniicl/trainer.hpp"

namespace uniicl::cli {

inline constexpr const char* kConfigEnv = "UNIICL_CONFIG";

struct Paths {
  std::string corpus;
  std::string validation;
  std::string pool;
  std::string bank;
  std::string backbone;
  std::string params;
  std::string reports;
};

/// Everything a run needs. Sub-seeds are derived from `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  int ratio = 12;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  TrainConfig train;
  SelectionConfig selection;
  GenerationConfig generation;
  SynthSpec synth;
  Paths paths;

  BackboneConfig backbone_config() const;
  PretrainConfig pretrain_config() const;
  TrainConfig train_config() const;
  GenerationConfig generation_config() const;
  SynthSpec synth_spec() const;
};

/// Canonical JSON text of the config (sorted keys, fixed layout).
std::string config_to_json(const RunConfig& cfg);

/// Layers a JSON document over `base`. Keys the config does not know and
/// values of the wrong type raise ConfigError naming the dotted key.
RunConfig apply_json(const RunConfig& base, std::string_view json_text, std::string_view origin);

/// Applies one `dotted.key=value` override; value is parsed as JSON, and
/// taken as a plain string when that fails.
RunConfig apply_override(const RunConfig& base, std::string_view assignment);

/// defaults < file (explicit path, else $UNIICL_CONFIG when set) < overrides.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::string>& overrides);

/// Digest of the canonical config with the report destination left out.
Digest config_digest(const RunConfig& cfg);

}  // namespace uniicl::cli
