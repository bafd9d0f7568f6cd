#pragma once

#include "cbpt/config.hpp"

namespace cbpt {

// Fraction of benign test images classified as their true label.
double clean_accuracy(const DualEncoderParams& params, const PromptBank& bank,
                      const Dataset& testset);

// Fraction of triggered non-target-class test images classified as the
// target class.
double attack_success_rate(const DualEncoderParams& params, const PromptBank& bank,
                           const Dataset& testset, const TriggerSpec& trigger, int target_class);

struct EvalCell {
  std::string attack;
  std::string defense;
  double ca = 0.0;
  double asr = 0.0;
  int n_clean = 0;
  int n_triggered = 0;
  std::string error;  // empty on success
};

// One CA/ASR pair per (attack, defense) cell. Per-cell runtimes are run
// metadata and are serialized into the run manifest, not the report file,
// so identical (config, seed) runs produce byte-identical reports.
struct EvalReport {
  std::string kind = "matrix";  // matrix | ablation
  std::string axis;             // ablation axis name, empty for matrices
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<EvalCell> cells;
  std::map<std::string, double> runtime_seconds;  // "attack/defense" -> s
};

// Stable-key-order JSON; metric values are rounded to 4 decimal places.
std::string serialize_report(const EvalReport& report);
EvalReport parse_report_text(const std::string& json_text);
EvalReport parse_report(const std::string& path);

// Percent rendering used for report tables, e.g. "BadNet CA 58.83 / ASR 96.51".
std::string render_cell_percent(const std::string& name, double ca, double asr);

// The defended model/bank pair a defense produces for evaluation.
struct DefenseOutcome {
  DualEncoderParams params;
  PromptBank bank;
  DefenseLog log;
};

// Runs the named defense on an already-pretrained suspicious model at the
// config's settings and clean-data budget.
DefenseOutcome run_defense(const std::string& defense_name, const DualEncoderParams& suspicious,
                           const Dataset& clean_shots, const ExperimentConfig& cfg);

// Full independently-seeded pipeline for one (attack, defense) cell.
EvalCell run_cell(const ExperimentConfig& base, const std::string& attack_name,
                  const std::string& defense_label, double* runtime_s);

// Grid of independently seeded cells; cell failures are recorded in-report.
EvalReport run_matrix(const std::vector<std::string>& attacks,
                      const std::vector<std::string>& defenses, const ExperimentConfig& shared);

// One cbpt cell per axis value on the configured attack.
EvalReport run_ablation(const std::string& axis, const ExperimentConfig& base);

const std::vector<std::string>& ablation_axes();

}  // namespace cbpt
