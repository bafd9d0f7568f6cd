#include "cbpt/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace cbpt {

std::string to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::patch: return "patch";
    case TriggerKind::blended: return "blended";
    case TriggerKind::sig: return "sig";
    default: return "warp_lite";
  }
}

TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "patch") return TriggerKind::patch;
  if (s == "blended") return TriggerKind::blended;
  if (s == "sig") return TriggerKind::sig;
  if (s == "warp_lite") return TriggerKind::warp_lite;
  throw ConfigError("unknown trigger kind '" + s + "' (expected patch|blended|sig|warp_lite)");
}

std::string trigger_display_name(TriggerKind k) {
  switch (k) {
    case TriggerKind::patch: return "BadNet";
    case TriggerKind::blended: return "Blended";
    case TriggerKind::sig: return "SIG";
    default: return "WarpLite";
  }
}

void TriggerSpec::validate(int channels, int image_size) const {
  if (kind == TriggerKind::patch) {
    const int ph = patch_pixels.size() != 0 ? patch_h : 3;
    const int pw = patch_pixels.size() != 0 ? patch_w : 3;
    if (ph < 1 || pw < 1) throw ConfigError("TriggerSpec: patch must be non-empty");
    const int y = loc_y < 0 ? image_size - ph : loc_y;
    const int x = loc_x < 0 ? image_size - pw : loc_x;
    if (y < 0 || x < 0 || y + ph > image_size || x + pw > image_size)
      throw ContractError("TriggerSpec: patch out of image bounds");
  }
  if (patch_pixels.size() != 0 &&
      (patch_pixels.rows() != channels || patch_pixels.cols() != patch_h * patch_w))
    throw ConfigError("TriggerSpec: patch_pixels shape mismatch");
  if (blend_ratio < 0.0 || blend_ratio > 1.0)
    throw ConfigError("TriggerSpec: blend_ratio must be in [0,1]");
  if (sig_amplitude < 0.0 || sig_amplitude > 255.0)
    throw ConfigError("TriggerSpec: sig_amplitude must be in [0,255]");
}

Mat default_patch(int channels) {
  Mat patch(channels, 9);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < 9; ++i) patch(c, i) = ((i / 3 + i % 3) % 2 == 0) ? 1.0 : 0.0;
  return patch;
}

Mat blended_pattern(const TriggerSpec& spec, int channels) {
  if (spec.patch_pixels.size() != 0) return spec.patch_pixels;
  Rng rng(derive_seed(spec.rng_seed, "blended-pattern"));
  Mat pattern(channels, spec.patch_h * spec.patch_w);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < pattern.cols(); ++i) pattern(c, i) = rng.uniform();
  return pattern;
}

void PoisonConfig::validate(int n_classes) const {
  if (target_class < 0 || target_class >= n_classes)
    throw ConfigError("PoisonConfig: target_class out of range");
  if (poison_rate <= 0.0 || poison_rate >= 1.0)
    throw ConfigError("PoisonConfig: poison_rate must be in (0,1)");
}

namespace {

double sample_bilinear(const double* chan, int hw, double y, double x) {
  y = std::clamp(y, 0.0, hw - 1.0);
  x = std::clamp(x, 0.0, hw - 1.0);
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, hw - 1), x1 = std::min(x0 + 1, hw - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * chan[y0 * hw + x0] + fx * chan[y0 * hw + x1]) +
         fy * ((1 - fx) * chan[y1 * hw + x0] + fx * chan[y1 * hw + x1]);
}

}  // namespace

Vec apply_trigger(const Vec& image, const TriggerSpec& spec, int channels, int image_size) {
  spec.validate(channels, image_size);
  const int hw = image_size;
  if (image.size() != channels * hw * hw)
    throw ContractError("apply_trigger: image size mismatch");
  Vec out = image;
  switch (spec.kind) {
    case TriggerKind::patch: {
      const Mat patch = spec.patch_pixels.size() != 0 ? spec.patch_pixels : default_patch(channels);
      const int ph = spec.patch_pixels.size() != 0 ? spec.patch_h : 3;
      const int pw = spec.patch_pixels.size() != 0 ? spec.patch_w : 3;
      const int y0 = spec.loc_y < 0 ? hw - ph : spec.loc_y;
      const int x0 = spec.loc_x < 0 ? hw - pw : spec.loc_x;
      for (int c = 0; c < channels; ++c)
        for (int py = 0; py < ph; ++py)
          for (int px = 0; px < pw; ++px)
            out[(c * hw + y0 + py) * hw + x0 + px] = patch(c, py * pw + px);
      break;
    }
    case TriggerKind::blended: {
      const Mat pattern = blended_pattern(spec, channels);
      const double b = spec.blend_ratio;
      for (int c = 0; c < channels; ++c)
        for (int y = 0; y < hw; ++y)
          for (int x = 0; x < hw; ++x) {
            const double p = pattern(c, (y % spec.patch_h) * spec.patch_w + (x % spec.patch_w));
            double& v = out[(c * hw + y) * hw + x];
            v = (1.0 - b) * v + b * p;
          }
      break;
    }
    case TriggerKind::sig: {
      const double amp = spec.sig_amplitude / 255.0;
      const double two_pi = 6.283185307179586476925286766559;
      for (int x = 0; x < hw; ++x) {
        const double s = amp * std::sin(two_pi * spec.sig_frequency * x / hw);
        for (int c = 0; c < channels; ++c)
          for (int y = 0; y < hw; ++y) out[(c * hw + y) * hw + x] += s;
      }
      break;
    }
    case TriggerKind::warp_lite: {
      Rng rng(derive_seed(spec.rng_seed, "warp-phase"));
      const double two_pi = 6.283185307179586476925286766559;
      const double phase_y = two_pi * rng.uniform();
      const double phase_x = two_pi * rng.uniform();
      const double w = spec.warp_strength;
      for (int c = 0; c < channels; ++c) {
        const double* src = image.data() + c * hw * hw;
        for (int y = 0; y < hw; ++y)
          for (int x = 0; x < hw; ++x) {
            const double sy = y + w * std::sin(two_pi * x / hw + phase_y);
            const double sx = x + w * std::sin(two_pi * y / hw + phase_x);
            out[(c * hw + y) * hw + x] = sample_bilinear(src, hw, sy, sx);
          }
      }
      break;
    }
  }
  return clamp01(out);
}

PoisonOutcome poison_dataset(const Dataset& dataset, const PoisonConfig& config) {
  if (dataset.size() == 0) throw ContractError("poison_dataset: empty dataset");
  const int m = static_cast<int>(std::floor(dataset.size() * config.poison_rate));
  if (m < 1) throw ContractError("poison_dataset: dataset size * poison_rate < 1");
  PoisonOutcome out;
  out.data = dataset;
  std::vector<int> order(dataset.size());
  for (int i = 0; i < dataset.size(); ++i) order[i] = i;
  Rng rng(derive_seed(config.rng_seed, "poison-pick"));
  rng.shuffle(order);
  out.poisoned_indices.assign(order.begin(), order.begin() + m);
  std::sort(out.poisoned_indices.begin(), out.poisoned_indices.end());
  for (int idx : out.poisoned_indices) {
    out.data.images.col(idx) =
        apply_trigger(dataset.images.col(idx), config.trigger, dataset.channels, dataset.image_size);
    out.data.labels[idx] = config.target_class;
  }
  return out;
}

Dataset triggered_testset(const Dataset& testset, const TriggerSpec& spec, int target_class) {
  std::vector<int> keep;
  for (int i = 0; i < testset.size(); ++i)
    if (testset.labels[i] != target_class) keep.push_back(i);
  Dataset out;
  out.channels = testset.channels;
  out.image_size = testset.image_size;
  out.images.resize(testset.images.rows(), static_cast<Eigen::Index>(keep.size()));
  out.labels.resize(keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.images.col(k) =
        apply_trigger(testset.images.col(keep[k]), spec, testset.channels, testset.image_size);
    out.labels[k] = testset.labels[keep[k]];
  }
  return out;
}

}  // namespace cbpt
