#pragma once

#include "cbpt/evaluation.hpp"

namespace cbpt {

// Artifact filenames inside a run directory (named by config digest prefix).
namespace artifact {
inline constexpr const char* poison = "poison.json";
inline constexpr const char* model = "model.ckpt";
inline constexpr const char* bank = "bank.ckpt";
inline constexpr const char* defended_model = "model_defended.ckpt";
inline constexpr const char* defense_log = "defense_log.json";
inline constexpr const char* manifest = "manifest.json";
}  // namespace artifact

// Executes the enabled stages in order (poison -> pretrain -> defend ->
// eval), persisting checkpoints, the report, plots, and a run manifest with
// wall times and artifact digests. Skipped stages load their artifacts from
// the configured resume path (or the default path in the run directory),
// which must exist. A failing stage leaves partial artifacts plus a
// "<stage>.failed" marker and rethrows. Returns the run directory.
std::string run_pipeline(const ExperimentConfig& cfg);

// The run directory a config maps to: <run_dir>/<digest prefix>.
std::string run_directory(const ExperimentConfig& cfg);

}  // namespace cbpt
