#pragma once

#include "cbpt/dataset.hpp"

namespace cbpt {

enum class TriggerKind { patch, blended, sig, warp_lite };

std::string to_string(TriggerKind k);
TriggerKind trigger_kind_from_string(const std::string& s);

// Table-row display names used when rendering reports.
std::string trigger_display_name(TriggerKind k);

// Declarative visual trigger. Fusion rules per kind:
//   patch     overwrite the patch region at `location`
//   blended   (1-b)*image + b*tiled(pattern) over the whole image
//   sig       add a column-wise sinusoid of amplitude sig_amplitude/255, clamp
//   warp_lite resample through a fixed smooth coordinate warp
struct TriggerSpec {
  TriggerKind kind = TriggerKind::patch;
  Mat patch_pixels;       // [c x (h*w)] row-major per channel; empty = default
  int patch_h = 3, patch_w = 3;
  int loc_y = -1, loc_x = -1;  // top-left anchor; -1 = bottom-right corner
  double blend_ratio = 0.2;
  double sig_amplitude = 40.0;  // in 0..255 units
  double sig_frequency = 6.0;
  double warp_strength = 1.5;   // pixels
  std::uint64_t rng_seed = 7;

  void validate(int channels, int image_size) const;
};

// 3x3 saturated checkerboard, the conventional corner patch.
Mat default_patch(int channels);
// Seeded uniform-noise pattern used when a blended spec has no pattern.
Mat blended_pattern(const TriggerSpec& spec, int channels);

struct PoisonConfig {
  int target_class = 0;
  double poison_rate = 0.05;
  TriggerSpec trigger;
  std::uint64_t rng_seed = 2;

  void validate(int n_classes) const;
};

// v_hat = v (+) trigger; output stays in [0,1], deterministic in the spec.
Vec apply_trigger(const Vec& image, const TriggerSpec& spec, int channels, int image_size);

struct PoisonOutcome {
  Dataset data;
  std::vector<int> poisoned_indices;  // sorted
};

// Replaces exactly floor(size * rate) pairs: trigger fused into the image and
// the caption label switched to the target class. The input is not modified.
PoisonOutcome poison_dataset(const Dataset& dataset, const PoisonConfig& config);

// Every non-target-class test image, trigger-fused, with its original label.
Dataset triggered_testset(const Dataset& testset, const TriggerSpec& spec, int target_class);

}  // namespace cbpt
