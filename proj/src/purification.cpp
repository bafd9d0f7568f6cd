#include "cbpt/purification.hpp"

#include <cmath>
#include <thread>

namespace cbpt {

void DefenseConfig::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
    throw ConfigError("DefenseConfig: loss weights must be >= 0");
  if (alpha < 0) throw ConfigError("DefenseConfig: alpha must be >= 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs)
    throw ConfigError("DefenseConfig: need 0 <= warmup_epochs <= epochs");
  if (batch_size < 1) throw ConfigError("DefenseConfig: batch_size must be >= 1");
  if (context_length < 1) throw ConfigError("DefenseConfig: context_length must be >= 1");
  if (shots < 1) throw ConfigError("DefenseConfig: shots must be >= 1");
  if (!std::isfinite(lr)) throw ConfigError("DefenseConfig: lr must be finite");
}

double adv_loss(const Vec& p_pert, int y_prime) {
  return -std::log(std::max(1.0 - p_pert(y_prime), kProbFloor));
}

double align_loss(const Vec& p_clean, const Vec& p_pert, int y) {
  return p_clean(y) * (p_clean - p_pert).norm();
}

double benign_loss(const Vec& p_clean, const Vec& p_pert, int y, double alpha) {
  return -std::log(std::max(p_clean(y), kProbFloor)) -
         alpha * std::log(std::max(p_pert(y), kProbFloor));
}

namespace {

// d(softmax)/d(logits) applied to an upstream dL/dp.
Vec softmax_backward(const Vec& p, const Vec& d_p) {
  const double dot = p.dot(d_p);
  return p.array() * (d_p.array() - dot);
}

struct PerAnchorGrads {
  Vec d_p_clean;
  Vec d_p_pert;
};

// Distribution-space gradients of the lambda-weighted objective.
PerAnchorGrads loss_grads(const Vec& p_clean, const Vec& p_pert, int y, int y_prime,
                          const DefenseConfig& cfg, bool warmup) {
  const int n = static_cast<int>(p_clean.size());
  PerAnchorGrads g{Vec::Zero(n), Vec::Zero(n)};
  // benign
  if (p_clean(y) > kProbFloor) g.d_p_clean(y) += cfg.lambda3 * (-1.0 / p_clean(y));
  if (p_pert(y) > kProbFloor) g.d_p_pert(y) += cfg.lambda3 * (-cfg.alpha / p_pert(y));
  if (warmup) return g;
  // adversarial
  if (1.0 - p_pert(y_prime) > kProbFloor)
    g.d_p_pert(y_prime) += cfg.lambda1 / (1.0 - p_pert(y_prime));
  // alignment
  const Vec diff = p_clean - p_pert;
  const double dist = diff.norm();
  g.d_p_clean(y) += cfg.lambda2 * dist;
  if (dist > 1e-12) {
    g.d_p_clean += cfg.lambda2 * (p_clean(y) / dist) * diff;
    g.d_p_pert -= cfg.lambda2 * (p_clean(y) / dist) * diff;
  }
  return g;
}

}  // namespace

LossBreakdown outer_step(PromptBank& bank, const DualEncoderParams& params, const OuterBatch& batch,
                         const DefenseConfig& cfg) {
  const int b = batch.size();
  if (b == 0) return {};
  if (batch.anchors.cols() != b || batch.deltas.cols() != b ||
      batch.backdoor_classes.size() != static_cast<std::size_t>(b))
    throw ContractError("outer_step: batch field sizes disagree");

  const auto seqs = build_text_inputs(bank, params.class_tokens);
  const int n = bank.n_classes;
  std::vector<TextTrace> traces(n);
  Mat text_embs(params.config.embed_dim, n);
  for (int j = 0; j < n; ++j) {
    traces[j] = text_forward(params, seqs[j], bank.context_len + 1);
    text_embs.col(j) = traces[j].emb;
  }

  const Mat e_clean = encode_image(params, batch.anchors);
  const Mat e_pert = encode_image(params, clamp01(batch.anchors + batch.deltas));

  // model confidence at the contrastive logit scale 1/tau; the plain
  // similarity softmax stays the public class_probabilities surface
  const double inv_tau = 1.0 / params.config.temperature;

  LossBreakdown sum;
  Mat d_text = Mat::Zero(params.config.embed_dim, n);
  for (int i = 0; i < b; ++i) {
    const int y = batch.labels[i];
    const int y_prime = batch.backdoor_classes[i];
    const bool warmup = y_prime < 0;
    const Vec p_clean = softmax(inv_tau * text_embs.transpose() * e_clean.col(i));
    const Vec p_pert = softmax(inv_tau * text_embs.transpose() * e_pert.col(i));

    const double l_bn = benign_loss(p_clean, p_pert, y, cfg.alpha);
    double l_adv = 0.0, l_align = 0.0;
    if (!warmup) {
      l_adv = adv_loss(p_pert, y_prime);
      l_align = align_loss(p_clean, p_pert, y);
    }
    sum.adv += l_adv;
    sum.align += l_align;
    sum.benign += l_bn;
    sum.combined += cfg.lambda1 * l_adv + cfg.lambda2 * l_align + cfg.lambda3 * l_bn;

    const PerAnchorGrads g = loss_grads(p_clean, p_pert, y, y_prime, cfg, warmup);
    const Vec ds_clean = inv_tau * softmax_backward(p_clean, g.d_p_clean) / b;
    const Vec ds_pert = inv_tau * softmax_backward(p_pert, g.d_p_pert) / b;
    d_text += e_clean.col(i) * ds_clean.transpose() + e_pert.col(i) * ds_pert.transpose();
  }

  LossBreakdown mean{sum.adv / b, sum.align / b, sum.benign / b, sum.combined / b};
  if (!std::isfinite(mean.combined))
    throw TrainingError("outer_step: non-finite loss (adv=" + std::to_string(mean.adv) +
                        " align=" + std::to_string(mean.align) +
                        " benign=" + std::to_string(mean.benign) +
                        ") on a batch of " + std::to_string(b));

  // token gradients route to the context rows only; the class-token row is frozen
  const int m = bank.context_len;
  const int p = bank.prefix;
  std::vector<Mat> ctx_grads(bank.context.size());
  for (auto& gmat : ctx_grads) gmat = Mat::Zero(m, bank.dim());
  for (int j = 0; j < n; ++j) {
    const Mat d_tokens = text_backward(params, traces[j], d_text.col(j), nullptr);
    Mat& gmat = ctx_grads[bank.class_wise ? j : 0];
    gmat.topRows(p) += d_tokens.topRows(p);
    gmat.bottomRows(m - p) += d_tokens.bottomRows(m - p);
  }
  for (std::size_t k = 0; k < bank.context.size(); ++k) bank.context[k] -= cfg.lr * ctx_grads[k];
  return mean;
}

namespace {

double accuracy_against(const Mat& text_embs, const Mat& image_embs, const std::vector<int>& labels) {
  const Mat sims = text_embs.transpose() * image_embs;
  int hit = 0;
  for (int i = 0; i < sims.cols(); ++i)
    if (argmax_lowest(sims.col(i)) == labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace

PromptBank train_cbpt(const DualEncoderParams& params, const Dataset& clean_dataset,
                      const DefenseConfig& cfg, DefenseLog* log, const EpochMonitor& monitor,
                      int workers) {
  cfg.validate();
  if (clean_dataset.size() < 1) throw ContractError("train_cbpt: empty clean dataset");
  const int n_classes = params.config.vocab;
  const int dim = params.config.token_dim;

  NoiseBudget budget = cfg.budget;
  if (budget.rho <= 0.0) budget.rho = default_rho(clean_dataset.pixel_count());
  budget.validate();

  Rng init_rng(derive_seed(cfg.rng_seed, "bank-init"));
  PromptBank bank = PromptBank::gaussian(n_classes, cfg.context_length, dim, cfg.class_position,
                                         cfg.class_wise, 0.02, init_rng);

  // params are frozen, so clean-image embeddings are constant for the run
  const Mat embs = encode_image(params, clean_dataset.images);
  const auto by_class = indices_by_class(clean_dataset, n_classes);

  Rng shuffle_rng(derive_seed(cfg.rng_seed, "cbpt-shuffle"));
  Rng pos_rng(derive_seed(cfg.rng_seed, "cbpt-positive"));
  std::vector<int> order(clean_dataset.size());
  for (int i = 0; i < clean_dataset.size(); ++i) order[i] = i;

  InversionStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    const bool warmup = epoch < cfg.warmup_epochs;
    LossBreakdown epoch_sum;
    int epoch_anchors = 0;
    for (int start = 0; start < clean_dataset.size(); start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, clean_dataset.size() - start);
      OuterBatch ob;
      ob.anchors.resize(clean_dataset.images.rows(), bsz);
      ob.deltas = Mat::Zero(clean_dataset.images.rows(), bsz);
      if (warmup) {
        for (int i = 0; i < bsz; ++i) {
          ob.anchors.col(i) = clean_dataset.images.col(order[start + i]);
          ob.labels.push_back(clean_dataset.labels[order[start + i]]);
          ob.backdoor_classes.push_back(-1);
        }
      } else {
        const Mat text_embs = text_embeddings(params, bank);
        // selection first (sequential, owns the rng), inversion after
        struct Job {
          int dataset_index, y_prime, pos_index;
        };
        std::vector<Job> jobs;
        for (int i = 0; i < bsz; ++i) {
          const int idx = order[start + i];
          const int y = clean_dataset.labels[idx];
          const int y_prime = approximate_backdoor_class_from(text_embs, embs.col(idx), y);
          if (y_prime == y) ++stats.backdoor_class_violations;
          const auto pos = select_positive_index(by_class, embs, y_prime, embs.col(idx),
                                                 cfg.positive_strategy, &pos_rng);
          if (!pos) {
            ++stats.skipped_anchors;
            continue;
          }
          jobs.push_back({idx, y_prime, *pos});
        }
        std::vector<Vec> deltas(jobs.size());
        std::vector<InversionStats> job_stats(jobs.size());
        auto run_range = [&](std::size_t lo, std::size_t hi) {
          for (std::size_t k = lo; k < hi; ++k)
            deltas[k] = invert_delta(params, clean_dataset.images.col(jobs[k].dataset_index),
                                     embs.col(jobs[k].pos_index), embs.col(jobs[k].dataset_index),
                                     budget, &job_stats[k]);
        };
        const int nw = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
        if (nw <= 1) {
          run_range(0, jobs.size());
        } else {
          std::vector<std::thread> pool;
          const std::size_t chunk = (jobs.size() + nw - 1) / nw;
          for (int w = 0; w < nw; ++w) {
            const std::size_t lo = w * chunk;
            const std::size_t hi = std::min(jobs.size(), lo + chunk);
            if (lo < hi) pool.emplace_back(run_range, lo, hi);
          }
          for (auto& t : pool) t.join();
        }
        // deterministic reduction in anchor order
        ob.anchors.resize(clean_dataset.images.rows(), static_cast<Eigen::Index>(jobs.size()));
        ob.deltas.resize(clean_dataset.images.rows(), static_cast<Eigen::Index>(jobs.size()));
        for (std::size_t k = 0; k < jobs.size(); ++k) {
          ob.anchors.col(k) = clean_dataset.images.col(jobs[k].dataset_index);
          ob.deltas.col(k) = deltas[k];
          ob.labels.push_back(clean_dataset.labels[jobs[k].dataset_index]);
          ob.backdoor_classes.push_back(jobs[k].y_prime);
          stats.inversion_calls += job_stats[k].inversion_calls;
          stats.inner_steps += job_stats[k].inner_steps;
          stats.budget_violations += job_stats[k].budget_violations;
          stats.range_violations += job_stats[k].range_violations;
          stats.descent_violations += job_stats[k].descent_violations;
        }
      }
      if (ob.size() == 0) continue;
      const LossBreakdown bd = outer_step(bank, params, ob, cfg);
      epoch_sum.adv += bd.adv * ob.size();
      epoch_sum.align += bd.align * ob.size();
      epoch_sum.benign += bd.benign * ob.size();
      epoch_sum.combined += bd.combined * ob.size();
      epoch_anchors += ob.size();
    }
    if (log || monitor) {
      EpochLog el;
      el.epoch = epoch;
      const double denom = std::max(epoch_anchors, 1);
      el.mean_loss = {epoch_sum.adv / denom, epoch_sum.align / denom, epoch_sum.benign / denom,
                      epoch_sum.combined / denom};
      el.clean_train_acc = accuracy_against(text_embeddings(params, bank), embs, clean_dataset.labels);
      if (monitor) monitor(epoch, bank, el);
      if (log) log->epochs.push_back(el);
    }
  }
  if (log) log->stats = stats;
  return bank;
}

// ---------------------------------------------------------------------------
// Baselines.
// ---------------------------------------------------------------------------

namespace {

struct AugmentOptions {
  double strength = 0.0;
  double ss_weight = 0.0;
};

Vec augment_image(const Vec& image, int channels, int hw, double strength, Rng& rng) {
  // crop-and-resize plus a per-channel intensity shift; identity at strength 0
  const double shrink = 0.3 * strength * rng.uniform();
  const int cs = std::max(4, static_cast<int>(std::lround(hw * (1.0 - shrink))));
  const int y0 = cs < hw ? rng.uniform_int(hw - cs + 1) : 0;
  const int x0 = cs < hw ? rng.uniform_int(hw - cs + 1) : 0;
  Vec out(image.size());
  if (cs == hw && y0 == 0 && x0 == 0) {
    out = image;
  } else {
    const double scale = static_cast<double>(cs - 1) / std::max(hw - 1, 1);
    for (int c = 0; c < channels; ++c) {
      const double* src = image.data() + c * hw * hw;
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          const double sy = y0 + y * scale;
          const double sx = x0 + x * scale;
          const int iy0 = std::min(static_cast<int>(sy), hw - 1);
          const int ix0 = std::min(static_cast<int>(sx), hw - 1);
          const int iy1 = std::min(iy0 + 1, hw - 1);
          const int ix1 = std::min(ix0 + 1, hw - 1);
          const double fy = sy - iy0, fx = sx - ix0;
          out[(c * hw + y) * hw + x] =
              (1 - fy) * ((1 - fx) * src[iy0 * hw + ix0] + fx * src[iy0 * hw + ix1]) +
              fy * ((1 - fx) * src[iy1 * hw + ix0] + fx * src[iy1 * hw + ix1]);
        }
    }
  }
  for (int c = 0; c < channels; ++c) {
    const double shift = rng.uniform(-0.1 * strength, 0.1 * strength);
    if (shift != 0.0)
      out.segment(static_cast<Eigen::Index>(c) * hw * hw, static_cast<Eigen::Index>(hw) * hw)
          .array() += shift;
  }
  return clamp01(out);
}

Mat dropout_caption(const DualEncoderParams& params, int label, int context_len, double strength,
                    Rng& rng) {
  Mat seq = Mat::Zero(context_len + 1, params.config.token_dim);
  seq.row(context_len) = params.class_tokens.row(label);
  const double p_drop = std::min(0.5, 0.3 * strength);
  for (int r = 0; r < context_len; ++r)
    if (rng.uniform() < p_drop) seq.row(r).setZero();  // context rows are zero here by construction
  return seq;
}

BaselineResult contrastive_finetune(const DualEncoderParams& params, const Dataset& clean,
                                    int epochs, double lr, int context_len, int batch_size,
                                    std::uint64_t seed, const AugmentOptions& aug) {
  BaselineResult result;
  result.params = params;
  if (epochs == 0) return result;
  if (clean.size() < 2) throw ContractError("baseline fine-tuning: need at least 2 clean pairs");

  Adam opt(lr);
  Rng shuffle_rng(derive_seed(seed, "defense-ft-shuffle"));
  Rng aug_rng(derive_seed(seed, "defense-ft-augment"));
  std::vector<int> order(clean.size());
  for (int i = 0; i < clean.size(); ++i) order[i] = i;

  const bool augmented = aug.strength > 0.0 || aug.ss_weight > 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double total = 0.0;
    int batches = 0;
    for (int start = 0; start + 2 <= clean.size(); start += batch_size) {
      const int n = std::min(batch_size, clean.size() - start);
      if (n < 2) break;
      Mat view1(clean.images.rows(), n);
      Mat view2;
      std::vector<int> labels(n);
      if (aug.ss_weight > 0.0) view2.resize(clean.images.rows(), n);
      for (int i = 0; i < n; ++i) {
        const int idx = order[start + i];
        labels[i] = clean.labels[idx];
        if (augmented)
          view1.col(i) = augment_image(clean.images.col(idx), clean.channels, clean.image_size,
                                       aug.strength, aug_rng);
        else
          view1.col(i) = clean.images.col(idx);
        if (aug.ss_weight > 0.0)
          view2.col(i) = augment_image(clean.images.col(idx), clean.channels, clean.image_size,
                                       aug.strength, aug_rng);
      }
      GradMap grads;
      double loss = clip_loss_grad(result.params, view1, labels, context_len, &grads);
      if (aug.ss_weight > 0.0) {
        // unimodal terms: 1 - cos over two views, both modalities
        ImageTrace t1 = image_forward(result.params, view1);
        ImageTrace t2 = image_forward(result.params, view2);
        Mat d1(t1.emb.rows(), n), d2(t2.emb.rows(), n);
        double ss_img = 0.0;
        for (int i = 0; i < n; ++i) {
          ss_img += 1.0 - similarity(t1.emb.col(i), t2.emb.col(i));
          d1.col(i) = -aug.ss_weight / n * t2.emb.col(i);
          d2.col(i) = -aug.ss_weight / n * t1.emb.col(i);
        }
        image_backward(result.params, t1, d1, &grads);
        image_backward(result.params, t2, d2, &grads);
        double ss_txt = 0.0;
        for (int i = 0; i < n; ++i) {
          TextTrace a = text_forward(result.params,
                                     dropout_caption(result.params, labels[i], context_len,
                                                     aug.strength, aug_rng));
          TextTrace b = text_forward(result.params,
                                     dropout_caption(result.params, labels[i], context_len,
                                                     aug.strength, aug_rng));
          ss_txt += 1.0 - similarity(a.emb, b.emb);
          Mat da = text_backward(result.params, a, Vec(-aug.ss_weight / n * b.emb), &grads);
          Mat db = text_backward(result.params, b, Vec(-aug.ss_weight / n * a.emb), &grads);
          Mat d_class = Mat::Zero(result.params.class_tokens.rows(), result.params.class_tokens.cols());
          d_class.row(labels[i]) = da.row(context_len) + db.row(context_len);
          accumulate(grads, "class_tokens", d_class);
        }
        loss += aug.ss_weight * (ss_img + ss_txt) / n;
      }
      if (!std::isfinite(loss))
        throw TrainingError("baseline fine-tuning: non-finite loss at epoch " + std::to_string(epoch));
      opt.step(result.params, grads);
      total += loss;
      ++batches;
    }
    result.epoch_loss.push_back(total / std::max(batches, 1));
  }
  return result;
}

}  // namespace

BaselineResult baseline_ft(const DualEncoderParams& params, const Dataset& clean_pairs, int epochs,
                           double lr, int context_len, int batch_size, std::uint64_t seed) {
  return contrastive_finetune(params, clean_pairs, epochs, lr, context_len, batch_size, seed, {});
}

BaselineResult baseline_cleanclip(const DualEncoderParams& params, const Dataset& clean_pairs,
                                  int epochs, double lr, double aug_strength, double ss_weight,
                                  int context_len, int batch_size, std::uint64_t seed) {
  AugmentOptions aug;
  aug.strength = aug_strength;
  aug.ss_weight = ss_weight;
  return contrastive_finetune(params, clean_pairs, epochs, lr, context_len, batch_size, seed, aug);
}

}  // namespace cbpt
