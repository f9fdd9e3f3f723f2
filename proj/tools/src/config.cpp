#include "config.hpp"

#include <cstdlib>

#include "json.hpp"

#include "uniicl/errors.hpp"
#include "uniicl/io.hpp"

namespace uniicl::cli {

using nlohmann::json;

namespace {

std::string mode_name(CandidateMode m) {
  return m == CandidateMode::kHighResource ? "high" : "low";
}

std::string mode_name(DecodeMode m) { return m == DecodeMode::kGreedy ? "greedy" : "sampled"; }

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["ratio"] = c.ratio;
  j["backbone"] = {{"vocab_size", c.backbone.vocab_size},
                   {"embed_dim", c.backbone.embed_dim},
                   {"n_layers", c.backbone.n_layers},
                   {"n_heads", c.backbone.n_heads},
                   {"max_positions", c.backbone.max_positions},
                   {"mlp_mult", c.backbone.mlp_mult}};
  j["pretrain"] = {{"learning_rate", c.pretrain.learning_rate},
                   {"batch", c.pretrain.batch},
                   {"epochs", c.pretrain.epochs}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"effective_batch", c.train.effective_batch},
                {"epochs_phase1", c.train.epochs_phase1},
                {"epochs_phase2", c.train.epochs_phase2},
                {"ratio_min", c.train.ratio_min},
                {"ratio_max", c.train.ratio_max},
                {"fixed_ratio", c.train.fixed_ratio ? json(*c.train.fixed_ratio) : json(nullptr)},
                {"validation_ratio", c.train.validation_ratio},
                {"temperature", c.train.temperature},
                {"candidates_per_set", c.train.candidates_per_set}};
  j["selection"] = {{"n_shots", c.selection.n_shots},
                    {"prerank_top", c.selection.prerank_top},
                    {"low_resource_pool", c.selection.low_resource_pool},
                    {"mode", mode_name(c.selection.mode)}};
  j["generation"] = {{"max_new_tokens", c.generation.max_new_tokens},
                     {"mode", mode_name(c.generation.mode)},
                     {"temperature", c.generation.temperature}};
  j["synth"] = {{"copy", c.synth.copy},
                {"reverse", c.synth.reverse},
                {"classify", c.synth.classify},
                {"retrieval_pools", c.synth.retrieval_pools},
                {"passages_per_pool", c.synth.passages_per_pool},
                {"band", c.synth.band.str()},
                {"word_pool", c.synth.word_pool},
                {"n_keys", c.synth.n_keys}};
  j["paths"] = {{"corpus", c.paths.corpus},     {"validation", c.paths.validation},
                {"pool", c.paths.pool},         {"bank", c.paths.bank},
                {"backbone", c.paths.backbone}, {"params", c.paths.params},
                {"reports", c.paths.reports}};
  return j;
}

template <typename T>
void read(const json& j, const char* section, const char* key, T& out) {
  const json& v = j.at(section).at(key);
  try {
    out = v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(section) + "." + key + ": wrong type (" + v.dump() + ")");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(key) + ": wrong type (" + j.at(key).dump() + ")");
  }
}

RunConfig from_json(const json& j) {
  RunConfig c;
  read(j, "seed", c.seed);
  read(j, "threads", c.threads);
  read(j, "ratio", c.ratio);
  read(j, "backbone", "vocab_size", c.backbone.vocab_size);
  read(j, "backbone", "embed_dim", c.backbone.embed_dim);
  read(j, "backbone", "n_layers", c.backbone.n_layers);
  read(j, "backbone", "n_heads", c.backbone.n_heads);
  read(j, "backbone", "max_positions", c.backbone.max_positions);
  read(j, "backbone", "mlp_mult", c.backbone.mlp_mult);
  read(j, "pretrain", "learning_rate", c.pretrain.learning_rate);
  read(j, "pretrain", "batch", c.pretrain.batch);
  read(j, "pretrain", "epochs", c.pretrain.epochs);
  read(j, "train", "learning_rate", c.train.learning_rate);
  read(j, "train", "effective_batch", c.train.effective_batch);
  read(j, "train", "epochs_phase1", c.train.epochs_phase1);
  read(j, "train", "epochs_phase2", c.train.epochs_phase2);
  read(j, "train", "ratio_min", c.train.ratio_min);
  read(j, "train", "ratio_max", c.train.ratio_max);
  const json& fixed = j.at("train").at("fixed_ratio");
  if (fixed.is_null()) {
    c.train.fixed_ratio.reset();
  } else if (fixed.is_number_integer()) {
    c.train.fixed_ratio = fixed.get<int>();
  } else {
    throw ConfigError("train.fixed_ratio: expected an integer or null");
  }
  read(j, "train", "validation_ratio", c.train.validation_ratio);
  read(j, "train", "temperature", c.train.temperature);
  read(j, "train", "candidates_per_set", c.train.candidates_per_set);
  read(j, "selection", "n_shots", c.selection.n_shots);
  read(j, "selection", "prerank_top", c.selection.prerank_top);
  read(j, "selection", "low_resource_pool", c.selection.low_resource_pool);
  std::string mode;
  read(j, "selection", "mode", mode);
  if (mode == "high")
    c.selection.mode = CandidateMode::kHighResource;
  else if (mode == "low")
    c.selection.mode = CandidateMode::kLowResource;
  else
    throw ConfigError("selection.mode: expected \"high\" or \"low\", got \"" + mode + "\"");
  read(j, "generation", "max_new_tokens", c.generation.max_new_tokens);
  read(j, "generation", "mode", mode);
  if (mode == "greedy")
    c.generation.mode = DecodeMode::kGreedy;
  else if (mode == "sampled")
    c.generation.mode = DecodeMode::kSampled;
  else
    throw ConfigError("generation.mode: expected \"greedy\" or \"sampled\", got \"" + mode + "\"");
  read(j, "generation", "temperature", c.generation.temperature);
  read(j, "synth", "copy", c.synth.copy);
  read(j, "synth", "reverse", c.synth.reverse);
  read(j, "synth", "classify", c.synth.classify);
  read(j, "synth", "retrieval_pools", c.synth.retrieval_pools);
  read(j, "synth", "passages_per_pool", c.synth.passages_per_pool);
  std::string band;
  read(j, "synth", "band", band);
  c.synth.band = LengthBand::parse(band);
  read(j, "synth", "word_pool", c.synth.word_pool);
  read(j, "synth", "n_keys", c.synth.n_keys);
  read(j, "paths", "corpus", c.paths.corpus);
  read(j, "paths", "validation", c.paths.validation);
  read(j, "paths", "pool", c.paths.pool);
  read(j, "paths", "bank", c.paths.bank);
  read(j, "paths", "backbone", c.paths.backbone);
  read(j, "paths", "params", c.paths.params);
  read(j, "paths", "reports", c.paths.reports);
  if (c.ratio < 1) throw ConfigError("ratio: must be >= 1");
  if (c.threads < 1) throw ConfigError("threads: must be >= 1");
  return c;
}

// Copies `patch` into `target`, rejecting keys absent from `target`.
void merge_checked(json& target, const json& patch, const std::string& prefix) {
  if (!patch.is_object())
    throw ConfigError((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string dotted = prefix.empty() ? key : prefix + "." + key;
    if (!target.contains(key)) throw ConfigError(dotted + ": unknown config key");
    json& slot = target[key];
    if (slot.is_object())
      merge_checked(slot, value, dotted);
    else if (value.is_object())
      throw ConfigError(dotted + ": expected a value, got an object");
    else if (slot.is_number_unsigned() && value.is_number() && !value.is_number_unsigned())
      throw ConfigError(dotted + ": expected a non-negative integer, got " + value.dump());
    else
      slot = value;
  }
}

}  // namespace

BackboneConfig RunConfig::backbone_config() const {
  BackboneConfig b = backbone;
  b.seed = seed;
  return b;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p = pretrain;
  p.seed = seed + 1;
  return p;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed + 2;
  return t;
}

GenerationConfig RunConfig::generation_config() const {
  GenerationConfig g = generation;
  g.seed = seed + 3;
  return g;
}

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s = synth;
  s.vocab_size = backbone.vocab_size;
  s.seed = seed + 4;
  return s;
}

std::string config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig apply_json(const RunConfig& base, std::string_view json_text, std::string_view origin) {
  json patch;
  try {
    patch = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(origin) + ": " + e.what());
  }
  json merged = to_json(base);
  merge_checked(merged, patch, "");
  return from_json(merged);
}

RunConfig apply_override(const RunConfig& base, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override \"" + std::string(assignment) + "\": expected key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  std::vector<std::string> parts;
  for (std::size_t begin = 0;;) {
    const auto dot = key.find('.', begin);
    parts.push_back(key.substr(begin, dot - begin));
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }
  json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  json merged = to_json(base);
  merge_checked(merged, patch, "");
  return from_json(merged);
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::string>& overrides) {
  RunConfig cfg;
  std::optional<std::filesystem::path> path = file;
  if (!path) {
    if (const char* env = std::getenv(kConfigEnv); env && *env) path = env;
  }
  if (path) cfg = apply_json(cfg, io::read_text(*path), path->string());
  for (const auto& o : overrides) cfg = apply_override(cfg, o);
  return cfg;
}

Digest config_digest(const RunConfig& cfg) {
  // Where a report is written does not change what it contains.
  RunConfig inputs = cfg;
  inputs.paths.reports.clear();
  return sha256(config_to_json(inputs));
}

}  // namespace uniicl::cli
