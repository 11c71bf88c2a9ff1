#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "nfa/model.hpp"
#include "nfa/synth.hpp"

namespace nfa {

struct TrainOptions {
  int epochs = 30;
  int batch_size = 16;
  double lr = 5e-3;
  double weight_decay = 1e-6;
  double warmup_fraction = 0.05;
  /// Global L2 gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  int eval_batch_size = 16;

  void validate() const;
};

/// Everything that affects a run's results. Paths are included so the
/// resolved dump is self-describing.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs/default";
  CorpusSpec corpus;
  ModelConfig model;
  TrainOptions train;

  void validate() const;
};

/// Parses `key = value` lines ('#' starts a comment) on top of `base`.
/// Unknown keys and malformed values throw ConfigError naming `origin` and
/// the line.
RunConfig parse_run_config(const std::string& text, const std::string& origin,
                           RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

/// Applies a single key. Throws ConfigError for unknown keys or bad values.
void set_config_key(RunConfig& config, const std::string& key, const std::string& value);

/// Every key with its value, one per line, in a fixed order. Parsing the
/// result reproduces the config.
std::string format_run_config(const RunConfig& config);
void write_resolved_config(const std::filesystem::path& path, const RunConfig& config);

/// Model keys only (the checkpoint manifest uses these).
void write_model_keys(std::ostream& out, const ModelConfig& model);
/// Returns false when `key` is not a model key.
bool set_model_key(ModelConfig& model, const std::string& key, const std::string& value);

/// Component presets: none, +noise, +noise+naa, +noise+wd, full.
void apply_ablation(ModelConfig& model, const std::string& preset);
const std::vector<std::string>& ablation_presets();
/// Name of the preset matching the component switches, or "custom".
std::string ablation_name(const ModelConfig& model);

/// Reads NFA_SEED; returns false when unset. Throws ConfigError when set to
/// something that is not an unsigned integer.
bool seed_from_env(std::uint64_t& seed);

}  // namespace nfa
