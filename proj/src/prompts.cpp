#include "cbpt/prompts.hpp"

namespace cbpt {

std::string to_string(ClassPosition p) {
  switch (p) {
    case ClassPosition::front: return "front";
    case ClassPosition::middle: return "middle";
    default: return "end";
  }
}

ClassPosition class_position_from_string(const std::string& s) {
  if (s == "front") return ClassPosition::front;
  if (s == "middle") return ClassPosition::middle;
  if (s == "end") return ClassPosition::end;
  throw ConfigError("unknown class_position '" + s + "' (expected front|middle|end)");
}

int prefix_for(ClassPosition position, int context_len) {
  switch (position) {
    case ClassPosition::front: return 0;
    case ClassPosition::middle: return (context_len + 1) / 2;
    default: return context_len;
  }
}

void PromptBank::validate() const {
  if (n_classes < 1) throw ConfigError("PromptBank: n_classes must be >= 1");
  if (context_len < 1) throw ConfigError("PromptBank: context_len must be >= 1");
  if (prefix < 0 || prefix > context_len) throw ConfigError("PromptBank: prefix out of range");
  const std::size_t expected = class_wise ? static_cast<std::size_t>(n_classes) : 1u;
  if (context.size() != expected) throw ConfigError("PromptBank: context entry count mismatch");
  for (const Mat& c : context)
    if (c.rows() != context_len) throw ConfigError("PromptBank: context row count mismatch");
  if (prefix != prefix_for(position, context_len))
    throw ConfigError("PromptBank: prefix inconsistent with class_position");
}

PromptBank PromptBank::zeros(int n_classes, int context_len, int dim, ClassPosition position,
                             bool class_wise) {
  PromptBank b;
  b.n_classes = n_classes;
  b.context_len = context_len;
  b.position = position;
  b.prefix = prefix_for(position, context_len);
  b.class_wise = class_wise;
  b.context.assign(class_wise ? n_classes : 1, Mat::Zero(context_len, dim));
  return b;
}

PromptBank PromptBank::gaussian(int n_classes, int context_len, int dim, ClassPosition position,
                                bool class_wise, double std, Rng& rng) {
  PromptBank b = zeros(n_classes, context_len, dim, position, class_wise);
  for (Mat& c : b.context)
    for (int r = 0; r < c.rows(); ++r)
      for (int col = 0; col < c.cols(); ++col) c(r, col) = std * rng.gaussian();
  return b;
}

std::vector<Mat> build_text_inputs(const PromptBank& bank, const Mat& class_tokens) {
  bank.validate();
  if (class_tokens.rows() < bank.n_classes)
    throw ContractError("build_text_inputs: class token table has fewer rows than classes");
  if (!bank.context.empty() && class_tokens.cols() != bank.context[0].cols())
    throw ConfigError("build_text_inputs: token dim mismatch between bank and class tokens");
  std::vector<Mat> seqs(bank.n_classes);
  const int m = bank.context_len;
  const int p = bank.prefix;
  for (int cls = 0; cls < bank.n_classes; ++cls) {
    const Mat& ctx = bank.context_for(cls);
    Mat seq(m + 1, class_tokens.cols());
    seq.topRows(p) = ctx.topRows(p);
    seq.row(p) = class_tokens.row(cls);
    seq.bottomRows(m - p) = ctx.bottomRows(m - p);
    seqs[cls] = std::move(seq);
  }
  return seqs;
}

Mat text_embeddings(const DualEncoderParams& params, const PromptBank& bank) {
  const auto seqs = build_text_inputs(bank, params.class_tokens);
  Mat embs(params.config.embed_dim, bank.n_classes);
  for (int cls = 0; cls < bank.n_classes; ++cls)
    embs.col(cls) = encode_text(params, seqs[cls], bank.context_len + 1);
  return embs;
}

Vec class_probabilities(const DualEncoderParams& params, const PromptBank& bank, const Vec& image) {
  const Mat text_embs = text_embeddings(params, bank);
  const Vec e_v = encode_image(params, image);
  return softmax(text_embs.transpose() * e_v);
}

int zero_shot_classify(const DualEncoderParams& params, const PromptBank& bank, const Vec& image) {
  const Mat text_embs = text_embeddings(params, bank);
  const Vec e_v = encode_image(params, image);
  return argmax_lowest(text_embs.transpose() * e_v);
}

std::vector<int> classify_batch(const DualEncoderParams& params, const Mat& text_embs,
                                const Mat& images) {
  const Mat e_v = encode_image(params, images);
  const Mat sims = text_embs.transpose() * e_v;  // [n_classes x B]
  std::vector<int> pred(images.cols());
  for (int b = 0; b < images.cols(); ++b) pred[b] = argmax_lowest(sims.col(b));
  return pred;
}

}  // namespace cbpt
