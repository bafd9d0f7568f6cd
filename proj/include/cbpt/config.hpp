#pragma once

#include <map>

#include "cbpt/attacks.hpp"
#include "cbpt/purification.hpp"

namespace cbpt {

// Full experiment description: dataset -> attack -> model -> defense -> eval,
// plus per-stage run/skip control. JSON on disk; see docs/formats.md.
struct ExperimentConfig {
  // dataset
  ToyDataSpec dataset;

  // attack; `enabled` is false when the config has an empty attack section
  // (defense-only run on a clean model)
  bool attack_enabled = true;
  PoisonConfig poison;

  // model + pretraining
  EncoderConfig model;
  int pretrain_epochs = 30;
  double pretrain_lr = 1e-3;
  int pretrain_batch = 32;

  // defense
  std::string defense_name = "cbpt";  // none | ft | cleanclip | cbpt
  DefenseConfig defense;
  double ft_lr = 1e-4;         // full-model fine-tune lr (ft / cleanclip)
  double aug_strength = 1.0;   // cleanclip augmentation strength
  double ss_weight = 1.0;      // cleanclip self-supervised weight

  // eval
  std::string report_name = "report.json";
  bool plots = true;

  // stage control: run or skip; skipped stages load from `resume` (or the
  // default artifact path inside the run directory)
  std::map<std::string, bool> stage_run = {
      {"poison", true}, {"pretrain", true}, {"defend", true}, {"eval", true}};
  std::map<std::string, std::string> resume;

  std::uint64_t seed = 42;
  int workers = 1;
  std::string run_dir = "runs";

  void validate() const;
};

// Parses and fully validates a config file. Missing keys take defaults,
// unknown keys are rejected by name, wrong types are rejected naming the key
// and the expected type.
ExperimentConfig parse_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& json_text);

// Canonical echo: every field explicit, fixed key order. Two configs are
// interchangeable iff their echoes are byte-identical.
std::string config_echo(const ExperimentConfig& cfg);
std::string config_digest(const ExperimentConfig& cfg);

// Applies `dotted.path=value` overrides (CLI --set and the CBPT_ environment
// prefix, with `__` standing for `.`) on top of raw config JSON text.
std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::pair<std::string, std::string>>& overrides);
std::vector<std::pair<std::string, std::string>> env_overrides(char** envp);

}  // namespace cbpt
