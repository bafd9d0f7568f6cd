#include "cbpt/inversion.hpp"

#include <cmath>

namespace cbpt {

double default_rho(int pixel_count) { return 6.0 / 255.0 * std::sqrt(static_cast<double>(pixel_count)); }

std::string to_string(PositiveStrategy s) {
  switch (s) {
    case PositiveStrategy::farthest: return "farthest";
    case PositiveStrategy::random: return "random";
    default: return "closest";
  }
}

PositiveStrategy positive_strategy_from_string(const std::string& s) {
  if (s == "farthest") return PositiveStrategy::farthest;
  if (s == "random") return PositiveStrategy::random;
  if (s == "closest") return PositiveStrategy::closest;
  throw ConfigError("unknown positive_strategy '" + s + "' (expected farthest|random|closest)");
}

int approximate_backdoor_class_from(const Mat& text_embs, const Vec& anchor_emb, int true_label) {
  const int n = static_cast<int>(text_embs.cols());
  if (n < 2) throw ContractError("approximate_backdoor_class: need at least 2 classes");
  const Vec sims = text_embs.transpose() * anchor_emb;
  int best = -1;
  for (int k = 0; k < n; ++k) {
    if (k == true_label) continue;
    if (best < 0 || sims(k) > sims(best)) best = k;
  }
  return best;
}

int approximate_backdoor_class(const DualEncoderParams& params, const PromptBank& bank,
                               const Vec& anchor_image, int true_label) {
  const Mat text_embs = text_embeddings(params, bank);
  const Vec e_v = encode_image(params, anchor_image);
  return approximate_backdoor_class_from(text_embs, e_v, true_label);
}

std::optional<int> select_positive_index(const std::vector<std::vector<int>>& by_class,
                                         const Mat& cached_embs, int y_prime, const Vec& anchor_emb,
                                         PositiveStrategy strategy, Rng* rng) {
  const auto& candidates = by_class[y_prime];
  if (candidates.empty()) return std::nullopt;
  if (strategy == PositiveStrategy::random) {
    if (!rng) throw ContractError("select_positive_index: random strategy needs an rng");
    return candidates[rng->uniform_int(static_cast<int>(candidates.size()))];
  }
  int best = candidates[0];
  double best_sim = similarity(cached_embs.col(best), anchor_emb);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double s = similarity(cached_embs.col(candidates[i]), anchor_emb);
    const bool better = strategy == PositiveStrategy::farthest ? s < best_sim : s > best_sim;
    if (better) {
      best = candidates[i];
      best_sim = s;
    }
  }
  return best;
}

std::optional<Vec> select_positive(const Dataset& clean_dataset, int y_prime,
                                   const Vec& anchor_embedding, const DualEncoderParams& params) {
  const int n_classes = params.config.vocab;
  const auto by_class = indices_by_class(clean_dataset, n_classes);
  if (by_class[y_prime].empty()) return std::nullopt;
  const Mat embs = encode_image(params, clean_dataset.images);
  const auto idx = select_positive_index(by_class, embs, y_prime, anchor_embedding,
                                         PositiveStrategy::farthest, nullptr);
  if (!idx) return std::nullopt;
  return Vec(clean_dataset.images.col(*idx));
}

double inversion_loss_grad(const DualEncoderParams& params, const Vec& anchor, const Vec& delta,
                           const Vec& e_pos, const Vec& e_neg, Vec* grad_delta) {
  const Vec raw = anchor + delta;
  const Mat x = clamp01(raw);
  ImageTrace trace = image_forward(params, x);
  const Vec e = trace.emb.col(0);
  const double loss = similarity(e, e_neg) - similarity(e, e_pos);
  if (grad_delta) {
    const Vec d_emb = e_neg - e_pos;
    Mat d_x = image_backward(params, trace, d_emb, nullptr);
    // clamp gradient: pass-through inside [0,1], zero outside
    Vec g = d_x.col(0);
    for (int i = 0; i < g.size(); ++i)
      if (raw(i) < 0.0 || raw(i) > 1.0) g(i) = 0.0;
    *grad_delta = g;
  }
  return loss;
}

double inversion_loss(const DualEncoderParams& params, const Vec& anchor, const Vec& delta,
                      const Vec& v_pos, const Vec& v_neg) {
  const Vec e_pos = encode_image(params, v_pos);
  const Vec e_neg = encode_image(params, v_neg);
  return inversion_loss_grad(params, anchor, delta, e_pos, e_neg, nullptr);
}

Vec invert_delta(const DualEncoderParams& params, const Vec& anchor, const Vec& e_pos,
                 const Vec& e_neg, const NoiseBudget& budget, InversionStats* stats) {
  budget.validate();
  Vec delta = Vec::Zero(anchor.size());
  double loss0 = 0.0;
  if (stats) ++stats->inversion_calls;
  for (int step = 0; step < budget.steps; ++step) {
    Vec grad;
    const double loss = inversion_loss_grad(params, anchor, delta, e_pos, e_neg, &grad);
    if (step == 0) loss0 = loss;
    delta -= budget.lr * grad;
    delta = project_l2(delta, budget.rho);
    delta = (clamp01(anchor + delta) - anchor).eval();
    if (stats) {
      ++stats->inner_steps;
      if (delta.norm() > budget.rho + 1e-9) ++stats->budget_violations;
      const Vec v = anchor + delta;
      if (v.minCoeff() < -1e-12 || v.maxCoeff() > 1.0 + 1e-12) ++stats->range_violations;
    }
  }
  if (stats) {
    const double loss_final = inversion_loss_grad(params, anchor, delta, e_pos, e_neg, nullptr);
    if (loss_final > loss0 + 1e-6) ++stats->descent_violations;
  }
  return delta;
}

std::optional<DummyTrigger> invert_trigger(const DualEncoderParams& params, const PromptBank& bank,
                                           const Vec& anchor, int label, const Dataset& clean_dataset,
                                           const NoiseBudget& budget, PositiveStrategy strategy,
                                           InversionStats* stats) {
  const Mat text_embs = text_embeddings(params, bank);
  const Vec anchor_emb = encode_image(params, anchor);
  const int y_prime = approximate_backdoor_class_from(text_embs, anchor_emb, label);
  if (stats && y_prime == label) ++stats->backdoor_class_violations;

  const auto by_class = indices_by_class(clean_dataset, bank.n_classes);
  const Mat embs = encode_image(params, clean_dataset.images);
  Rng rng(derive_seed(0, "invert-positive"));
  const auto pos_idx = select_positive_index(by_class, embs, y_prime, anchor_emb, strategy,
                                             strategy == PositiveStrategy::random ? &rng : nullptr);
  if (!pos_idx) {
    if (stats) ++stats->skipped_anchors;
    return std::nullopt;
  }
  const Vec e_pos = embs.col(*pos_idx);
  const Vec e_neg = anchor_emb;  // negative sample is the anchor itself
  DummyTrigger trig;
  trig.delta = invert_delta(params, anchor, e_pos, e_neg, budget, stats);
  trig.backdoor_class = y_prime;
  trig.anchor_index = -1;
  return trig;
}

}  // namespace cbpt
