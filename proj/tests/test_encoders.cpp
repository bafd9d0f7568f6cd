#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cbpt/prompts.hpp"
#include "oracles.hpp"

using namespace cbpt;

namespace {

EncoderConfig small_config() {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.embed_dim = 4;
  cfg.token_dim = 4;
  cfg.vocab = 3;
  cfg.image_tower_widths = {2};
  cfg.text_tower_widths = {3};
  cfg.seed = 9;
  return cfg;
}

Mat random_images(const EncoderConfig& cfg, int n, std::uint64_t seed, double lo = 0.0,
                  double hi = 1.0) {
  Rng rng(seed);
  Mat m(cfg.pixel_count(), n);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

Mat random_tokens(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian();
  return m;
}

}  // namespace

TEST_CASE("encode_image: determinism and unit norms") {
  auto params = init_params(small_config());
  Mat imgs = random_images(params.config, 5, 11);
  Mat batch(imgs.rows(), 2);
  batch.col(0) = imgs.col(0);
  batch.col(1) = imgs.col(0);
  Mat emb = encode_image(params, batch);
  CHECK((emb.col(0) - emb.col(1)).norm() == 0.0);  // identical inputs, identical rows
  Mat all = encode_image(params, imgs);
  for (int i = 0; i < all.cols(); ++i) CHECK(std::abs(all.col(i).norm() - 1.0) < 1e-6);
}

TEST_CASE("encode_image: matches the straight-line forward oracle") {
  // 4x4 single-channel input through a conv + head tower
  EncoderConfig cfg;
  cfg.image_size = 4;
  cfg.channels = 1;
  cfg.embed_dim = 5;
  cfg.token_dim = 5;
  cfg.vocab = 2;
  cfg.image_tower_widths = {3};
  cfg.text_tower_widths = {4};
  cfg.seed = 42;
  auto params = init_params(cfg);
  Mat img = random_images(cfg, 1, 3);
  CHECK((encode_image(params, img).col(0) - oracle::image_forward(params, img.col(0))).norm() <
        1e-10);
}

TEST_CASE("encode_image: shape mismatch is a configuration error") {
  auto params = init_params(small_config());
  Mat bad(params.config.pixel_count() + 1, 1);
  bad.setZero();
  CHECK_THROWS_AS(encode_image(params, bad), ConfigError);
}

TEST_CASE("encode_text: determinism, norm, oracle, contract") {
  auto params = init_params(small_config());
  Mat tokens = random_tokens(3, 4, 17);
  Vec a = encode_text(params, tokens);
  Vec b = encode_text(params, tokens);
  CHECK((a - b).norm() == 0.0);
  CHECK(std::abs(a.norm() - 1.0) < 1e-6);
  CHECK((a - oracle::text_forward(params, tokens)).norm() < 1e-10);
  CHECK_THROWS_AS(encode_text(params, tokens, 5), ContractError);         // wrong length
  CHECK_THROWS_AS(encode_text(params, random_tokens(3, 7, 1)), ContractError);  // wrong dim
}

TEST_CASE("encode_text: gradient vs central finite differences") {
  auto params = init_params(small_config());
  Mat tokens = random_tokens(3, 4, 23);
  // every output coordinate against every input token coordinate
  for (int out = 0; out < params.config.embed_dim; ++out) {
    TextTrace trace = text_forward(params, tokens);
    Vec d_emb = Vec::Zero(params.config.embed_dim);
    d_emb(out) = 1.0;
    Mat d_tokens = text_backward(params, trace, d_emb, nullptr);
    std::vector<double> ana, num;
    auto f = [&]() { return encode_text(params, tokens)(out); };
    for (int r = 0; r < tokens.rows(); ++r)
      for (int c = 0; c < tokens.cols(); ++c) {
        ana.push_back(d_tokens(r, c));
        num.push_back(oracle::central_diff(f, tokens(r, c), 1e-5));
      }
    CHECK(oracle::max_rel_err(ana, num) < 1e-4);
  }
}

TEST_CASE("similarity basics") {
  Vec e(3);
  e << 0.6, 0.8, 0.0;
  Vec orth(3);
  orth << -0.8, 0.6, 0.0;
  CHECK(similarity(e, e) == doctest::Approx(1.0));
  CHECK(similarity(e, orth) == doctest::Approx(0.0));
  CHECK(similarity(e, Vec(-e)) == doctest::Approx(-1.0));
}

TEST_CASE("contrastive loss: pair-count contract") {
  auto params = init_params(small_config());
  Mat one = random_images(params.config, 1, 5);
  std::vector<Mat> caps{random_tokens(3, 4, 6)};
  CHECK_THROWS_AS(contrastive_pretrain_loss(params, one, caps), ContractError);
}

TEST_CASE("contrastive loss: identical pairs give log 2") {
  auto params = init_params(small_config());
  Mat imgs(params.config.pixel_count(), 2);
  imgs.col(0) = random_images(params.config, 1, 7);
  imgs.col(1) = imgs.col(0);
  Mat cap = random_tokens(3, 4, 8);
  const double loss = contrastive_pretrain_loss(params, imgs, {cap, cap});
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("contrastive loss: invariant under pair permutation") {
  auto params = init_params(small_config());
  Mat imgs = random_images(params.config, 4, 19);
  std::vector<Mat> caps;
  for (int i = 0; i < 4; ++i) caps.push_back(random_tokens(3, 4, 100 + i));
  const double base = contrastive_pretrain_loss(params, imgs, caps);
  const int perm[4] = {2, 0, 3, 1};
  Mat imgs_p(imgs.rows(), 4);
  std::vector<Mat> caps_p(4);
  for (int i = 0; i < 4; ++i) {
    imgs_p.col(i) = imgs.col(perm[i]);
    caps_p[i] = caps[perm[i]];
  }
  CHECK(contrastive_pretrain_loss(params, imgs_p, caps_p) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("contrastive loss: matches direct-summation oracle") {
  auto params = init_params(small_config());
  Mat imgs = random_images(params.config, 3, 29);
  std::vector<Mat> caps;
  for (int i = 0; i < 3; ++i) caps.push_back(random_tokens(3, 4, 200 + i));
  Mat e_img(params.config.embed_dim, 3), e_txt(params.config.embed_dim, 3);
  for (int i = 0; i < 3; ++i) {
    e_img.col(i) = oracle::image_forward(params, imgs.col(i));
    e_txt.col(i) = oracle::text_forward(params, caps[i]);
  }
  const double expect = oracle::infonce(e_img, e_txt, params.config.temperature);
  CHECK(std::abs(contrastive_pretrain_loss(params, imgs, caps) - expect) < 1e-8);
}

TEST_CASE("contrastive loss: weight gradients vs finite differences on a 2-pair batch") {
  auto params = init_params(small_config());
  Mat imgs = random_images(params.config, 2, 31, 0.2, 0.8);
  std::vector<int> labels = {0, 2};
  GradMap grads;
  clip_loss_grad(params, imgs, labels, 2, &grads);
  auto f = [&]() { return clip_loss_grad(params, imgs, labels, 2, nullptr); };
  std::vector<double> ana, num;
  params.visit([&](const std::string& name, Mat& w) {
    const Mat& g = grads.at(name);
    for (int i = 0; i < w.size(); ++i) {
      ana.push_back(g.data()[i]);
      num.push_back(oracle::central_diff(f, w.data()[i], 1e-5));
    }
  });
  CHECK(oracle::max_rel_err(ana, num) < 1e-4);
}

TEST_CASE("pretrain: epochs=0 returns the initialization unchanged") {
  Dataset ds;
  EncoderConfig cfg = small_config();
  ds.channels = cfg.channels;
  ds.image_size = cfg.image_size;
  ds.images = random_images(cfg, 6, 37);
  ds.labels = {0, 1, 2, 0, 1, 2};
  auto result = pretrain(ds, cfg, 0, 1e-3, 2, 4);
  CHECK(params_digest(result.params) == params_digest(init_params(cfg)));
}

TEST_CASE("pretrain: deterministic and loss-improving on a tiny corpus") {
  ToyDataSpec spec;
  spec.classes = 3;
  spec.train_per_class = 12;
  spec.test_per_class = 4;
  spec.image_size = 8;
  spec.channels = 1;
  spec.seed = 5;
  auto data = make_toy_dataset(spec);
  EncoderConfig cfg = small_config();
  cfg.vocab = 3;
  auto a = pretrain(data.train, cfg, 4, 1e-3, 2, 8);
  auto b = pretrain(data.train, cfg, 4, 1e-3, 2, 8);
  CHECK(params_digest(a.params) == params_digest(b.params));
  CHECK(a.epoch_loss.back() < a.epoch_loss.front());
}

TEST_CASE("pretrain: divergence reports a training error") {
  ToyDataSpec spec;
  spec.classes = 2;
  spec.train_per_class = 8;
  spec.test_per_class = 2;
  spec.image_size = 8;
  spec.channels = 1;
  spec.seed = 6;
  auto data = make_toy_dataset(spec);
  EncoderConfig cfg = small_config();
  cfg.vocab = 2;
  cfg.temperature = 1e-9;  // exp overflow in the softmax path
  CHECK_THROWS_AS(pretrain(data.train, cfg, 2, 1e-3, 2, 8), TrainingError);
}

TEST_CASE("class_probabilities: softmax of similarities") {
  // hand-set similarities reduce the op to a scalar softmax
  Vec sims(3);
  sims << 0.9, 0.1, -0.2;
  const Vec p = softmax(sims);
  const auto expect = oracle::softmax({0.9, 0.1, -0.2});
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p(i) - expect[i]) < 1e-10);

  auto params = init_params(small_config());
  PromptBank bank = PromptBank::zeros(3, 2, 4);
  // identical class tokens force equal similarities, hence a uniform distribution
  auto uniform_params = params;
  for (int r = 1; r < uniform_params.class_tokens.rows(); ++r)
    uniform_params.class_tokens.row(r) = uniform_params.class_tokens.row(0);
  Vec img = random_images(params.config, 1, 41);
  Vec pu = class_probabilities(uniform_params, bank, img);
  for (int i = 0; i < 3; ++i) CHECK(pu(i) == doctest::Approx(1.0 / 3).epsilon(1e-9));

  // sums to one on random inputs
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    Vec image = random_images(params.config, 1, rng.next());
    Vec p2 = class_probabilities(params, bank, image);
    CHECK(std::abs(p2.sum() - 1.0) < 1e-6);
    CHECK(p2.minCoeff() > 0.0);
  }
}

TEST_CASE("zero_shot_classify: argmax with lowest-index ties") {
  Vec probs(3);
  probs << 0.1, 0.7, 0.2;
  CHECK(argmax_lowest(probs) == 1);
  Vec tie(4);
  tie << 0.4, 0.1, 0.4, 0.05;
  CHECK(argmax_lowest(tie) == 0);

  auto params = init_params(small_config());
  PromptBank bank = PromptBank::zeros(3, 2, 4);
  Rng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    Vec img = random_images(params.config, 1, rng.next());
    CHECK(zero_shot_classify(params, bank, img) ==
          argmax_lowest(class_probabilities(params, bank, img)));
  }
}

TEST_CASE("zero_shot_classify: invariant under positive rescaling of pre-norm embeddings") {
  auto params = init_params(small_config());
  PromptBank bank = PromptBank::zeros(3, 2, 4);
  auto scaled = params;
  scaled.image_tower.head_weight *= 3.7;
  scaled.image_tower.head_bias *= 3.7;
  Rng rng(53);
  for (int trial = 0; trial < 50; ++trial) {
    Vec img = random_images(params.config, 1, rng.next());
    CHECK(zero_shot_classify(params, bank, img) == zero_shot_classify(scaled, bank, img));
  }
}

TEST_CASE("params digest is sensitive to weights") {
  auto params = init_params(small_config());
  const std::string d1 = params_digest(params);
  params.class_tokens(0, 0) += 1e-9;
  CHECK(params_digest(params) != d1);
}
