#pragma once

#include "cbpt/prompts.hpp"

namespace cbpt {

// Single-file binary container: magic, JSON header (kind, config echo, array
// index), then raw little-endian float64 data column-major per array.
// Stable across runs; documented in docs/formats.md.

void save_params(const std::string& path, const DualEncoderParams& params);
DualEncoderParams load_params(const std::string& path);

void save_bank(const std::string& path, const PromptBank& bank);
PromptBank load_bank(const std::string& path);

}  // namespace cbpt
