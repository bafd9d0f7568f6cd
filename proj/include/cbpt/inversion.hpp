#pragma once

#include <optional>

#include "cbpt/prompts.hpp"

namespace cbpt {

struct NoiseBudget {
  double rho = 0.0;  // L2 radius of the flattened perturbation, pixel units
  int steps = 10;
  double lr = 0.1;

  void validate() const {
    if (rho <= 0.0) throw ConfigError("NoiseBudget: rho must be > 0");
    if (steps < 1) throw ConfigError("NoiseBudget: steps must be >= 1");
  }
};

// The nominal 6/255 budget interpreted as per-pixel RMS, i.e. scaled by
// sqrt(#pixels) into a total-vector L2 radius.
double default_rho(int pixel_count);

// Per-image inverted perturbation with its approximated backdoor class.
struct DummyTrigger {
  Vec delta;
  int backdoor_class = -1;
  int anchor_index = -1;
};

enum class PositiveStrategy { farthest, random, closest };
std::string to_string(PositiveStrategy s);
PositiveStrategy positive_strategy_from_string(const std::string& s);

// y' = argmax_{k != y} s(e_v, e_t^k); never equals the true label.
int approximate_backdoor_class(const DualEncoderParams& params, const PromptBank& bank,
                               const Vec& anchor_image, int true_label);
int approximate_backdoor_class_from(const Mat& text_embs, const Vec& anchor_emb, int true_label);

// Index of the y'-labeled image chosen by the strategy (farthest = minimal
// cosine similarity to the anchor embedding, ties to the lowest index).
// Empty when the class has no candidates; the anchor is then skipped.
std::optional<int> select_positive_index(const std::vector<std::vector<int>>& by_class,
                                         const Mat& cached_embs, int y_prime, const Vec& anchor_emb,
                                         PositiveStrategy strategy, Rng* rng);

// Spec-facing wrapper around the farthest strategy.
std::optional<Vec> select_positive(const Dataset& clean_dataset, int y_prime,
                                   const Vec& anchor_embedding, const DualEncoderParams& params);

// The clean anchor itself is the negative sample.
inline const Vec& select_negative(const Vec& anchor) { return anchor; }

// L = s(f(v+delta), e_neg) - s(f(v+delta), e_pos); v+delta is clamped to
// [0,1] before encoding, the clamp gradient is pass-through inside [0,1].
double inversion_loss(const DualEncoderParams& params, const Vec& anchor, const Vec& delta,
                      const Vec& v_pos, const Vec& v_neg);
double inversion_loss_grad(const DualEncoderParams& params, const Vec& anchor, const Vec& delta,
                           const Vec& e_pos, const Vec& e_neg, Vec* grad_delta);

// Constraint bookkeeping across inner loops; every counter should stay zero
// except calls/steps/skips.
struct InversionStats {
  long long inversion_calls = 0;
  long long inner_steps = 0;
  long long budget_violations = 0;
  long long range_violations = 0;
  long long backdoor_class_violations = 0;
  long long skipped_anchors = 0;
  long long descent_violations = 0;  // final loss > initial + 1e-6
};

// Projected gradient descent on the inversion loss from delta = 0.
Vec invert_delta(const DualEncoderParams& params, const Vec& anchor, const Vec& e_pos,
                 const Vec& e_neg, const NoiseBudget& budget, InversionStats* stats);

// Full per-anchor synthesis. Empty when no positive candidate exists.
std::optional<DummyTrigger> invert_trigger(const DualEncoderParams& params, const PromptBank& bank,
                                           const Vec& anchor, int label, const Dataset& clean_dataset,
                                           const NoiseBudget& budget,
                                           PositiveStrategy strategy = PositiveStrategy::farthest,
                                           InversionStats* stats = nullptr);

}  // namespace cbpt
