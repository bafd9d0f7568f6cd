#pragma once

#include "cbpt/evaluation.hpp"

namespace cbpt {

// Renders one grouped CA/ASR bar chart (SVG) for the report's cells, plus a
// JSON sidecar carrying the exact bar values. Filenames are deterministic:
// <report stem>_<axis or matrix>.svg / .sidecar.json inside out_dir.
// Returns the paths of every file written.
std::vector<std::string> emit_plots(const std::string& report_path, const std::string& out_dir);

}  // namespace cbpt
