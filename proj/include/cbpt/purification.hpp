#pragma once

#include "cbpt/inversion.hpp"

namespace cbpt {

struct DefenseConfig {
  double lambda1 = 0.4, lambda2 = 1.0, lambda3 = 1.0;
  double alpha = 0.1;       // perturbed-CE weight inside the benign loss
  int epochs = 20;          // T
  int warmup_epochs = 5;    // T0, benign loss only with delta = 0
  int batch_size = 32;
  double lr = 2e-3;         // plain SGD on the context
  NoiseBudget budget{0.0, 10, 0.1};  // rho <= 0 resolves to default_rho
  PositiveStrategy positive_strategy = PositiveStrategy::farthest;
  std::uint64_t rng_seed = 0;
  int context_length = 4;   // M
  ClassPosition class_position = ClassPosition::end;
  bool class_wise = true;
  int shots = 16;           // clean fine-tuning images per class (harness-side)

  void validate() const;
};

// eps floor inside every log and inside 1 - p(y').
constexpr double kProbFloor = 1e-8;

// -log(1 - p(y'|v+delta)): push perturbed images away from the backdoor class.
double adv_loss(const Vec& p_pert, int y_prime);

// p_clean(y) * || p_clean - p_pert ||_2: confidence-weighted distribution match.
double align_loss(const Vec& p_clean, const Vec& p_pert, int y);

// -log p_clean(y) - alpha * log p_pert(y): keep both views correctly labeled.
double benign_loss(const Vec& p_clean, const Vec& p_pert, int y, double alpha);

struct LossBreakdown {
  double adv = 0.0, align = 0.0, benign = 0.0, combined = 0.0;
};

// A batch of anchors with the dummy triggers synthesized for exactly this
// step. backdoor_class = -1 marks a warm-up batch (deltas are zero and only
// the benign loss applies).
struct OuterBatch {
  Mat anchors;  // [D x B]
  std::vector<int> labels;
  Mat deltas;   // [D x B]
  std::vector<int> backdoor_classes;

  int size() const { return static_cast<int>(labels.size()); }
};

// One SGD step on lambda1*L_adv + lambda2*L_align + lambda3*L_bn averaged
// over the batch; only the bank context moves, params stay frozen.
LossBreakdown outer_step(PromptBank& bank, const DualEncoderParams& params, const OuterBatch& batch,
                         const DefenseConfig& cfg);

struct EpochLog {
  int epoch = 0;
  LossBreakdown mean_loss;
  double clean_train_acc = 0.0;
  double ca = -1.0, asr = -1.0;  // filled by the monitor when attack info is known
};

struct DefenseLog {
  std::vector<EpochLog> epochs;
  InversionStats stats;
};

// Called once per epoch; the harness uses it to record CA/ASR against the
// attack it knows about (the defense itself is trigger-blind).
using EpochMonitor = std::function<void(int epoch, const PromptBank& bank, EpochLog& log)>;

// The bi-level defense loop: Gaussian-initialized class-wise prompts,
// warm-up epochs on the benign loss, then trigger inversion + prompt tuning.
PromptBank train_cbpt(const DualEncoderParams& params, const Dataset& clean_dataset,
                      const DefenseConfig& cfg, DefenseLog* log = nullptr,
                      const EpochMonitor& monitor = {}, int workers = 1);

struct BaselineResult {
  DualEncoderParams params;
  std::vector<double> epoch_loss;
};

// Full-model contrastive fine-tuning on clean pairs.
BaselineResult baseline_ft(const DualEncoderParams& params, const Dataset& clean_pairs, int epochs,
                           double lr, int context_len = 4, int batch_size = 32,
                           std::uint64_t seed = 0);

// FT plus augmented views and a unimodal self-supervised term on both
// modalities (two augmentations per image, context dropout per caption).
BaselineResult baseline_cleanclip(const DualEncoderParams& params, const Dataset& clean_pairs,
                                  int epochs, double lr, double aug_strength,
                                  double ss_weight = 1.0, int context_len = 4, int batch_size = 32,
                                  std::uint64_t seed = 0);

}  // namespace cbpt
