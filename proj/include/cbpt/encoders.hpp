#pragma once

#include <functional>
#include <map>

#include "cbpt/dataset.hpp"

namespace cbpt {

struct EncoderConfig {
  int image_size = 32;
  int channels = 3;
  int embed_dim = 64;
  int vocab = 10;       // class-token table rows, >= n_classes
  int token_dim = 64;   // must equal embed_dim
  double temperature = 0.07;
  std::vector<int> image_tower_widths = {16, 32};  // conv channels, stride-2 each
  std::vector<int> text_tower_widths = {64};       // MLP hidden sizes
  std::uint64_t seed = 1;

  int pixel_count() const { return channels * image_size * image_size; }
  void validate() const;
};

// One 3x3 stride-2 pad-1 convolution. Kernel rows are (channel, ky, kx)
// patch coordinates, columns are output channels.
struct ConvLayer {
  Mat kernel;  // [9*in_ch x out_ch]
  Mat bias;    // [out_ch x 1]
  int in_ch = 0, out_ch = 0, in_hw = 0, out_hw = 0;
};

struct ImageTower {
  std::vector<ConvLayer> conv;
  Mat head_weight;  // [d x flat]
  Mat head_bias;    // [d x 1]
};

// Mean-pool over tokens followed by an MLP; tanh between layers, L2
// normalization at the output.
struct TextTower {
  std::vector<Mat> weight;  // layer i: [out x in]
  std::vector<Mat> bias;    // [out x 1]
};

// The suspicious model under purification. Frozen during defense.
struct DualEncoderParams {
  EncoderConfig config;
  ImageTower image_tower;
  TextTower text_tower;
  Mat class_tokens;  // [vocab x d], row j is class j's token

  void visit(const std::function<void(const std::string&, Mat&)>& fn);
  void visit(const std::function<void(const std::string&, const Mat&)>& fn) const;
};

DualEncoderParams init_params(const EncoderConfig& cfg);

// Hex SHA-256 over config echo and all weight bytes.
std::string params_digest(const DualEncoderParams& params);

using GradMap = std::map<std::string, Mat>;
void accumulate(GradMap& grads, const std::string& name, const Mat& g);

// ---------------------------------------------------------------------------
// Forward / backward. Traces cache everything the backward pass needs;
// forward functions are pure in the params and safe to call concurrently.
// ---------------------------------------------------------------------------

struct ImageTrace {
  Mat input;                 // [D x B]
  std::vector<Mat> patches;  // per conv layer, [(B*opix) x 9*in_ch]
  std::vector<Mat> act;      // per conv layer, post-tanh [(B*opix) x out_ch]
  Mat head_in;               // [flat x B]
  Mat pre_norm;              // [d x B]
  Vec pre_norm_len;          // [B]
  Mat emb;                   // [d x B], unit columns
};

ImageTrace image_forward(const DualEncoderParams& params, const Mat& images);

// Embeddings only; one unit-norm column per image.
Mat encode_image(const DualEncoderParams& params, const Mat& images);

// Backpropagates d_emb [d x B]. Accumulates weight gradients into `grads`
// when non-null, returns the gradient w.r.t. the input pixels.
Mat image_backward(const DualEncoderParams& params, const ImageTrace& trace, const Mat& d_emb,
                   GradMap* grads);

struct TextTrace {
  Mat tokens;       // [L x d]
  Vec pooled;       // [d]
  std::vector<Vec> act;
  Vec pre_norm;
  double pre_norm_len = 0.0;
  Vec emb;          // unit norm
};

// expected_len < 0 skips the sequence-length contract check.
TextTrace text_forward(const DualEncoderParams& params, const Mat& tokens, int expected_len = -1);
Vec encode_text(const DualEncoderParams& params, const Mat& tokens, int expected_len = -1);

// Returns the gradient w.r.t. every input token row.
Mat text_backward(const DualEncoderParams& params, const TextTrace& trace, const Vec& d_emb,
                  GradMap* grads);

// ---------------------------------------------------------------------------
// Contrastive pretraining.
// ---------------------------------------------------------------------------

// Symmetric InfoNCE over matched (image, token-sequence) pairs, both
// directions averaged with 1/(2N). N >= 2.
double contrastive_pretrain_loss(const DualEncoderParams& params, const Mat& images,
                                 const std::vector<Mat>& captions);

// Same loss with captions built as [zero context rows; class token of
// labels[i]]; weight and class-token gradients accumulate into `grads`.
double clip_loss_grad(const DualEncoderParams& params, const Mat& images,
                      const std::vector<int>& labels, int context_len, GradMap* grads);

class Adam {
 public:
  explicit Adam(double lr, double weight_decay = 0.0) : lr_(lr), weight_decay_(weight_decay) {}
  void step(DualEncoderParams& params, const GradMap& grads);

 private:
  double lr_, weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int t_ = 0;
  std::map<std::string, std::pair<Mat, Mat>> state_;
};

struct PretrainResult {
  DualEncoderParams params;
  std::vector<double> epoch_loss;
};

// Contrastive pretraining on (possibly poisoned) labeled pairs. Captions use
// `context_len` zero context tokens plus the class token of the pair label.
// Decoupled weight decay keeps similarity gaps moderate.
PretrainResult pretrain(const Dataset& dataset, const EncoderConfig& cfg, int epochs, double lr,
                        int context_len = 4, int batch_size = 32, double weight_decay = 0.0);

}  // namespace cbpt
