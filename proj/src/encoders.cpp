#include "cbpt/encoders.hpp"

#include <cmath>

#include "cbpt/sha256.hpp"

namespace cbpt {

void EncoderConfig::validate() const {
  if (temperature <= 0.0) throw ConfigError("EncoderConfig: temperature must be > 0");
  if (embed_dim != token_dim) throw ConfigError("EncoderConfig: embed_dim must equal token_dim");
  if (image_size < 1 || channels < 1) throw ConfigError("EncoderConfig: bad image geometry");
  if (embed_dim < 1) throw ConfigError("EncoderConfig: embed_dim must be >= 1");
  if (vocab < 1) throw ConfigError("EncoderConfig: vocab must be >= 1");
  for (int w : image_tower_widths)
    if (w < 1) throw ConfigError("EncoderConfig: image tower widths must be >= 1");
  for (int w : text_tower_widths)
    if (w < 1) throw ConfigError("EncoderConfig: text tower widths must be >= 1");
}

namespace {

constexpr int kK = 3, kStride = 2, kPad = 1;

int conv_out_hw(int in_hw) { return (in_hw - 1) / kStride + 1; }

Mat gaussian_mat(int rows, int cols, double std, Rng& rng) {
  Mat m(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = std * rng.gaussian();
  return m;
}

// img is one CHW column; rows of the result are output pixels (oy*OW+ox),
// columns are (channel, ky, kx) patch entries.
void im2col(const double* img, int in_ch, int in_hw, int out_hw, Mat& patches, int row0) {
  for (int oy = 0; oy < out_hw; ++oy)
    for (int ox = 0; ox < out_hw; ++ox) {
      const int r = row0 + oy * out_hw + ox;
      for (int c = 0; c < in_ch; ++c)
        for (int ky = 0; ky < kK; ++ky) {
          const int iy = oy * kStride - kPad + ky;
          if (iy < 0 || iy >= in_hw) continue;
          for (int kx = 0; kx < kK; ++kx) {
            const int ix = ox * kStride - kPad + kx;
            if (ix < 0 || ix >= in_hw) continue;
            patches(r, c * 9 + ky * 3 + kx) = img[(c * in_hw + iy) * in_hw + ix];
          }
        }
    }
}

void col2im_add(const Mat& d_patches, int row0, int in_ch, int in_hw, int out_hw, double* d_img) {
  for (int oy = 0; oy < out_hw; ++oy)
    for (int ox = 0; ox < out_hw; ++ox) {
      const int r = row0 + oy * out_hw + ox;
      for (int c = 0; c < in_ch; ++c)
        for (int ky = 0; ky < kK; ++ky) {
          const int iy = oy * kStride - kPad + ky;
          if (iy < 0 || iy >= in_hw) continue;
          for (int kx = 0; kx < kK; ++kx) {
            const int ix = ox * kStride - kPad + kx;
            if (ix < 0 || ix >= in_hw) continue;
            d_img[(c * in_hw + iy) * in_hw + ix] += d_patches(r, c * 9 + ky * 3 + kx);
          }
        }
    }
}

// [(B*opix) x out_ch] activations -> [out_ch*opix x B] CHW columns.
Mat rows_to_chw(const Mat& act, int batch, int opix, int out_ch) {
  Mat chw(out_ch * opix, batch);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < out_ch; ++c)
      for (int i = 0; i < opix; ++i) chw(c * opix + i, b) = act(b * opix + i, c);
  return chw;
}

Mat chw_to_rows(const Mat& chw, int batch, int opix, int out_ch) {
  Mat rows(batch * opix, out_ch);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < out_ch; ++c)
      for (int i = 0; i < opix; ++i) rows(b * opix + i, c) = chw(c * opix + i, b);
  return rows;
}

Mat caption_tokens(const DualEncoderParams& params, int label, int context_len) {
  Mat seq = Mat::Zero(context_len + 1, params.config.token_dim);
  seq.row(context_len) = params.class_tokens.row(label);
  return seq;
}

}  // namespace

DualEncoderParams init_params(const EncoderConfig& cfg) {
  cfg.validate();
  DualEncoderParams p;
  p.config = cfg;
  Rng rng(derive_seed(cfg.seed, "params-init"));

  int hw = cfg.image_size;
  int ch = cfg.channels;
  for (int width : cfg.image_tower_widths) {
    ConvLayer layer;
    layer.in_ch = ch;
    layer.out_ch = width;
    layer.in_hw = hw;
    layer.out_hw = conv_out_hw(hw);
    const double std = std::sqrt(1.0 / (9.0 * ch));
    layer.kernel = gaussian_mat(9 * ch, width, std, rng);
    layer.bias = gaussian_mat(width, 1, 0.01, rng);
    p.image_tower.conv.push_back(std::move(layer));
    ch = width;
    hw = conv_out_hw(hw);
  }
  const int flat = ch * hw * hw;
  p.image_tower.head_weight = gaussian_mat(cfg.embed_dim, flat, std::sqrt(1.0 / flat), rng);
  p.image_tower.head_bias = gaussian_mat(cfg.embed_dim, 1, 0.01, rng);

  int in = cfg.token_dim;
  std::vector<int> sizes = cfg.text_tower_widths;
  sizes.push_back(cfg.embed_dim);
  for (int out : sizes) {
    p.text_tower.weight.push_back(gaussian_mat(out, in, std::sqrt(2.0 / in), rng));
    p.text_tower.bias.push_back(gaussian_mat(out, 1, 0.01, rng));
    in = out;
  }

  p.class_tokens = gaussian_mat(cfg.vocab, cfg.token_dim, std::sqrt(1.0 / cfg.token_dim), rng);
  return p;
}

void DualEncoderParams::visit(const std::function<void(const std::string&, Mat&)>& fn) {
  for (std::size_t i = 0; i < image_tower.conv.size(); ++i) {
    fn("image_tower.conv" + std::to_string(i) + ".kernel", image_tower.conv[i].kernel);
    fn("image_tower.conv" + std::to_string(i) + ".bias", image_tower.conv[i].bias);
  }
  fn("image_tower.head.weight", image_tower.head_weight);
  fn("image_tower.head.bias", image_tower.head_bias);
  for (std::size_t i = 0; i < text_tower.weight.size(); ++i) {
    fn("text_tower.fc" + std::to_string(i) + ".weight", text_tower.weight[i]);
    fn("text_tower.fc" + std::to_string(i) + ".bias", text_tower.bias[i]);
  }
  fn("class_tokens", class_tokens);
}

void DualEncoderParams::visit(const std::function<void(const std::string&, const Mat&)>& fn) const {
  auto& self = const_cast<DualEncoderParams&>(*this);
  self.visit([&](const std::string& name, Mat& m) { fn(name, m); });
}

std::string params_digest(const DualEncoderParams& params) {
  Sha256 h;
  const auto& c = params.config;
  const std::string echo = std::to_string(c.image_size) + "," + std::to_string(c.channels) + "," +
                           std::to_string(c.embed_dim) + "," + std::to_string(c.vocab);
  h.update(echo);
  params.visit([&](const std::string& name, const Mat& m) {
    h.update(name);
    h.update(m.data(), sizeof(double) * m.size());
  });
  return h.hex_digest();
}

void accumulate(GradMap& grads, const std::string& name, const Mat& g) {
  auto it = grads.find(name);
  if (it == grads.end())
    grads.emplace(name, g);
  else
    it->second += g;
}

// ---------------------------------------------------------------------------

ImageTrace image_forward(const DualEncoderParams& params, const Mat& images) {
  const auto& cfg = params.config;
  if (images.rows() != cfg.pixel_count())
    throw ConfigError("encode_image: pixel rows " + std::to_string(images.rows()) +
                      " do not match config (" + std::to_string(cfg.pixel_count()) + ")");
  const int batch = static_cast<int>(images.cols());
  ImageTrace t;
  t.input = images;
  Mat cur = images;
  for (const ConvLayer& layer : params.image_tower.conv) {
    const int opix = layer.out_hw * layer.out_hw;
    Mat patches = Mat::Zero(static_cast<Eigen::Index>(batch) * opix, 9 * layer.in_ch);
    for (int b = 0; b < batch; ++b)
      im2col(cur.col(b).data(), layer.in_ch, layer.in_hw, layer.out_hw, patches, b * opix);
    Mat act = ((patches * layer.kernel).rowwise() + layer.bias.col(0).transpose()).array().tanh();
    cur = rows_to_chw(act, batch, opix, layer.out_ch);
    t.patches.push_back(std::move(patches));
    t.act.push_back(std::move(act));
  }
  t.head_in = cur;
  t.pre_norm = (params.image_tower.head_weight * cur).colwise() + params.image_tower.head_bias.col(0);
  t.pre_norm_len.resize(batch);
  t.emb.resize(cfg.embed_dim, batch);
  for (int b = 0; b < batch; ++b) {
    const double len = std::max(t.pre_norm.col(b).norm(), 1e-12);
    t.pre_norm_len(b) = len;
    t.emb.col(b) = t.pre_norm.col(b) / len;
  }
  return t;
}

Mat encode_image(const DualEncoderParams& params, const Mat& images) {
  return image_forward(params, images).emb;
}

Mat image_backward(const DualEncoderParams& params, const ImageTrace& trace, const Mat& d_emb,
                   GradMap* grads) {
  const int batch = static_cast<int>(trace.input.cols());
  // unit-normalization backward: dz = (de - e (e.de)) / |z|
  Mat d_pre(d_emb.rows(), batch);
  for (int b = 0; b < batch; ++b) {
    const auto e = trace.emb.col(b);
    d_pre.col(b) = (d_emb.col(b) - e * e.dot(d_emb.col(b))) / trace.pre_norm_len(b);
  }
  if (grads) {
    accumulate(*grads, "image_tower.head.weight", d_pre * trace.head_in.transpose());
    accumulate(*grads, "image_tower.head.bias", d_pre.rowwise().sum());
  }
  Mat d_cur = params.image_tower.head_weight.transpose() * d_pre;
  for (int li = static_cast<int>(params.image_tower.conv.size()) - 1; li >= 0; --li) {
    const ConvLayer& layer = params.image_tower.conv[li];
    const int opix = layer.out_hw * layer.out_hw;
    Mat d_act = chw_to_rows(d_cur, batch, opix, layer.out_ch);
    Mat d_lin = d_act.array() * (1.0 - trace.act[li].array().square());
    if (grads) {
      const std::string base = "image_tower.conv" + std::to_string(li);
      accumulate(*grads, base + ".kernel", trace.patches[li].transpose() * d_lin);
      accumulate(*grads, base + ".bias", d_lin.colwise().sum().transpose());
    }
    Mat d_patches = d_lin * layer.kernel.transpose();
    Mat d_prev = Mat::Zero(layer.in_ch * layer.in_hw * layer.in_hw, batch);
    for (int b = 0; b < batch; ++b)
      col2im_add(d_patches, b * opix, layer.in_ch, layer.in_hw, layer.out_hw, d_prev.col(b).data());
    d_cur = std::move(d_prev);
  }
  return d_cur;
}

// ---------------------------------------------------------------------------

TextTrace text_forward(const DualEncoderParams& params, const Mat& tokens, int expected_len) {
  const auto& cfg = params.config;
  if (tokens.cols() != cfg.token_dim)
    throw ContractError("encode_text: token dimension " + std::to_string(tokens.cols()) +
                        " does not match d=" + std::to_string(cfg.token_dim));
  if (tokens.rows() < 1) throw ContractError("encode_text: empty token sequence");
  if (expected_len >= 0 && tokens.rows() != expected_len)
    throw ContractError("encode_text: sequence length " + std::to_string(tokens.rows()) +
                        ", expected " + std::to_string(expected_len));
  TextTrace t;
  t.tokens = tokens;
  t.pooled = tokens.colwise().mean().transpose();
  Vec cur = t.pooled;
  const std::size_t n_layers = params.text_tower.weight.size();
  for (std::size_t i = 0; i < n_layers; ++i) {
    Vec z = params.text_tower.weight[i] * cur + params.text_tower.bias[i].col(0);
    if (i + 1 < n_layers) {
      cur = z.array().tanh();
      t.act.push_back(cur);
    } else {
      cur = z;
    }
  }
  t.pre_norm = cur;
  t.pre_norm_len = std::max(cur.norm(), 1e-12);
  t.emb = cur / t.pre_norm_len;
  return t;
}

Vec encode_text(const DualEncoderParams& params, const Mat& tokens, int expected_len) {
  return text_forward(params, tokens, expected_len).emb;
}

Mat text_backward(const DualEncoderParams& params, const TextTrace& trace, const Vec& d_emb,
                  GradMap* grads) {
  const auto& e = trace.emb;
  Vec d_cur = (d_emb - e * e.dot(d_emb)) / trace.pre_norm_len;
  const int n_layers = static_cast<int>(params.text_tower.weight.size());
  for (int i = n_layers - 1; i >= 0; --i) {
    const Vec& input = i == 0 ? trace.pooled : trace.act[i - 1];
    if (grads) {
      const std::string base = "text_tower.fc" + std::to_string(i);
      accumulate(*grads, base + ".weight", d_cur * input.transpose());
      accumulate(*grads, base + ".bias", d_cur);
    }
    Vec d_in = params.text_tower.weight[i].transpose() * d_cur;
    if (i > 0) d_cur = d_in.array() * (1.0 - trace.act[i - 1].array().square());
    else d_cur = d_in;
  }
  const double inv_len = 1.0 / static_cast<double>(trace.tokens.rows());
  Mat d_tokens(trace.tokens.rows(), trace.tokens.cols());
  for (int r = 0; r < d_tokens.rows(); ++r) d_tokens.row(r) = d_cur.transpose() * inv_len;
  return d_tokens;
}

// ---------------------------------------------------------------------------

namespace {

// Shared InfoNCE core. Caller supplies embeddings; returns the loss and, when
// requested, the gradients w.r.t. both embedding matrices [d x N].
double infonce(const Mat& e_img, const Mat& e_txt, double tau, Mat* d_img, Mat* d_txt) {
  const int n = static_cast<int>(e_img.cols());
  if (n < 2) throw ContractError("contrastive_pretrain_loss: need at least 2 pairs");
  Mat logits = (e_img.transpose() * e_txt) / tau;  // [N x N], (i,j) = s(v_i, t_j)/tau
  Mat row_sm(n, n), col_sm(n, n);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    row_sm.row(i) = softmax(logits.row(i).transpose()).transpose();
    loss -= std::log(std::max(row_sm(i, i), 1e-300));
  }
  for (int j = 0; j < n; ++j) {
    col_sm.col(j) = softmax(logits.col(j));
    loss -= std::log(std::max(col_sm(j, j), 1e-300));
  }
  loss /= 2.0 * n;
  if (d_img || d_txt) {
    Mat d_logits = row_sm + col_sm;
    for (int i = 0; i < n; ++i) d_logits(i, i) -= 2.0;
    d_logits /= 2.0 * n * tau;
    if (d_img) *d_img = e_txt * d_logits.transpose();
    if (d_txt) *d_txt = e_img * d_logits;
  }
  return loss;
}

}  // namespace

double contrastive_pretrain_loss(const DualEncoderParams& params, const Mat& images,
                                 const std::vector<Mat>& captions) {
  if (images.cols() != static_cast<Eigen::Index>(captions.size()))
    throw ContractError("contrastive_pretrain_loss: image/caption count mismatch");
  if (images.cols() < 2) throw ContractError("contrastive_pretrain_loss: need at least 2 pairs");
  Mat e_img = encode_image(params, images);
  Mat e_txt(params.config.embed_dim, images.cols());
  for (std::size_t i = 0; i < captions.size(); ++i) e_txt.col(i) = encode_text(params, captions[i]);
  return infonce(e_img, e_txt, params.config.temperature, nullptr, nullptr);
}

double clip_loss_grad(const DualEncoderParams& params, const Mat& images,
                      const std::vector<int>& labels, int context_len, GradMap* grads) {
  const int n = static_cast<int>(images.cols());
  if (n < 2) throw ContractError("contrastive_pretrain_loss: need at least 2 pairs");
  if (labels.size() != static_cast<std::size_t>(n))
    throw ContractError("clip_loss_grad: label count mismatch");
  ImageTrace it = image_forward(params, images);
  std::vector<TextTrace> tt(n);
  Mat e_txt(params.config.embed_dim, n);
  for (int i = 0; i < n; ++i) {
    tt[i] = text_forward(params, caption_tokens(params, labels[i], context_len));
    e_txt.col(i) = tt[i].emb;
  }
  Mat d_img, d_txt;
  const double loss =
      infonce(it.emb, e_txt, params.config.temperature, grads ? &d_img : nullptr, grads ? &d_txt : nullptr);
  if (grads) {
    image_backward(params, it, d_img, grads);
    for (int i = 0; i < n; ++i) {
      Mat d_tokens = text_backward(params, tt[i], d_txt.col(i), grads);
      Mat d_class = Mat::Zero(params.class_tokens.rows(), params.class_tokens.cols());
      d_class.row(labels[i]) = d_tokens.row(context_len);
      accumulate(*grads, "class_tokens", d_class);
    }
  }
  return loss;
}

void Adam::step(DualEncoderParams& params, const GradMap& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  params.visit([&](const std::string& name, Mat& w) {
    auto git = grads.find(name);
    if (git == grads.end()) return;
    auto& [m, v] = state_[name];
    if (m.size() == 0) {
      m = Mat::Zero(w.rows(), w.cols());
      v = Mat::Zero(w.rows(), w.cols());
    }
    const Mat& g = git->second;
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    if (weight_decay_ > 0.0) w *= 1.0 - lr_ * weight_decay_;
    w.array() -= lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
  });
}

PretrainResult pretrain(const Dataset& dataset, const EncoderConfig& cfg, int epochs, double lr,
                        int context_len, int batch_size, double weight_decay) {
  cfg.validate();
  PretrainResult result;
  result.params = init_params(cfg);
  if (epochs == 0) return result;
  if (dataset.size() < 2) throw ContractError("pretrain: dataset needs at least 2 pairs");
  if (dataset.images.rows() != cfg.pixel_count())
    throw ConfigError("pretrain: dataset pixel rows do not match config");

  Adam opt(lr, weight_decay);
  Rng shuffle_rng(derive_seed(cfg.seed, "pretrain-shuffle"));
  std::vector<int> order(dataset.size());
  for (int i = 0; i < dataset.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double total = 0.0;
    int batches = 0;
    for (int start = 0; start + 2 <= dataset.size(); start += batch_size) {
      const int n = std::min(batch_size, dataset.size() - start);
      if (n < 2) break;
      Mat images(dataset.images.rows(), n);
      std::vector<int> labels(n);
      for (int i = 0; i < n; ++i) {
        images.col(i) = dataset.images.col(order[start + i]);
        labels[i] = dataset.labels[order[start + i]];
      }
      GradMap grads;
      const double loss = clip_loss_grad(result.params, images, labels, context_len, &grads);
      if (!std::isfinite(loss))
        throw TrainingError("pretrain: non-finite loss at epoch " + std::to_string(epoch));
      opt.step(result.params, grads);
      total += loss;
      ++batches;
    }
    result.epoch_loss.push_back(total / std::max(batches, 1));
  }
  if (epochs >= 2 && result.epoch_loss.back() >= result.epoch_loss.front())
    throw TrainingError("pretrain: loss did not improve from epoch 0 to epoch " +
                        std::to_string(epochs - 1));
  return result;
}

}  // namespace cbpt
