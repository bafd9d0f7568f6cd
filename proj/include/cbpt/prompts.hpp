#pragma once

#include "cbpt/encoders.hpp"

namespace cbpt {

enum class ClassPosition { front, middle, end };

std::string to_string(ClassPosition p);
ClassPosition class_position_from_string(const std::string& s);

// Number of context tokens preceding the class token.
int prefix_for(ClassPosition position, int context_len);

// Learnable class-wise context; the only trainable object during defense.
// With class_wise=false a single shared context is broadcast to all classes.
struct PromptBank {
  int n_classes = 0;
  int context_len = 0;  // M
  int prefix = 0;       // p, consistent with `position`
  ClassPosition position = ClassPosition::end;
  bool class_wise = true;
  std::vector<Mat> context;  // class_wise ? n_classes : 1 entries, each [M x d]

  const Mat& context_for(int cls) const { return context[class_wise ? cls : 0]; }
  Mat& context_for_mut(int cls) { return context[class_wise ? cls : 0]; }
  int dim() const { return context.empty() ? 0 : static_cast<int>(context[0].cols()); }
  void validate() const;

  static PromptBank zeros(int n_classes, int context_len, int dim,
                          ClassPosition position = ClassPosition::end, bool class_wise = false);
  static PromptBank gaussian(int n_classes, int context_len, int dim, ClassPosition position,
                             bool class_wise, double std, Rng& rng);
};

// One length-(M+1) token sequence per class: context rows with the class
// token inserted after the first `prefix` rows.
std::vector<Mat> build_text_inputs(const PromptBank& bank, const Mat& class_tokens);

// Text embedding per class, one unit-norm column each.
Mat text_embeddings(const DualEncoderParams& params, const PromptBank& bank);

// Softmax over cosine similarities between the image and every class text.
Vec class_probabilities(const DualEncoderParams& params, const PromptBank& bank, const Vec& image);

// argmax_j s(v, t_j); ties resolve to the lowest index.
int zero_shot_classify(const DualEncoderParams& params, const PromptBank& bank, const Vec& image);

// Batched predictions against precomputed text embeddings.
std::vector<int> classify_batch(const DualEncoderParams& params, const Mat& text_embs,
                                const Mat& images);

}  // namespace cbpt
