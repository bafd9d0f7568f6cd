#pragma once

#include "cbpt/common.hpp"

namespace cbpt {

// A labeled image batch. Columns are images in channel-major (CHW) layout,
// pixel values in [0,1].
struct Dataset {
  Mat images;
  std::vector<int> labels;
  int channels = 3;
  int image_size = 32;

  int size() const { return static_cast<int>(labels.size()); }
  int pixel_count() const { return channels * image_size * image_size; }
};

struct ToyDataSpec {
  int classes = 10;
  int train_per_class = 200;
  int test_per_class = 100;
  int image_size = 32;
  int channels = 3;
  std::uint64_t seed = 1;
};

struct ToySplits {
  Dataset train;
  Dataset test;
};

// Procedural corpus: each class is a distinct colored shape at a
// class-specific position, with per-image position/size/color jitter over a
// noisy background. Deterministic in the seed.
ToySplits make_toy_dataset(const ToyDataSpec& spec);

// Exactly `shots` images per class, drawn uniformly without replacement.
Dataset sample_shots(const Dataset& pool, int shots, std::uint64_t seed);

// Per-class index lists in dataset order.
std::vector<std::vector<int>> indices_by_class(const Dataset& ds, int n_classes);

}  // namespace cbpt
