// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavier end-to-end runs share pretrained models through a cache.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "cbpt/pipeline.hpp"
#include "oracles.hpp"

using namespace cbpt;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& id, bool pass, const std::string& detail) {
  std::printf("%s  %s: %s\n", pass ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

struct AttackRun {
  ExperimentConfig cfg;
  DualEncoderParams model;
  double ca0 = 0.0, asr0 = 0.0;
  double pretrain_seconds = 0.0;
};

struct DefenseRun {
  double ca = 0.0, asr = 0.0;
  DefenseLog log;
};

struct Lab {
  ExperimentConfig base;
  ToySplits data;
  Dataset shots;
  PromptBank zero_bank;

  explicit Lab(const ExperimentConfig& cfg)
      : base(cfg),
        data(make_toy_dataset(cfg.dataset)),
        shots(sample_shots(data.train, cfg.defense.shots, derive_seed(cfg.seed, "clean-shots"))),
        zero_bank(PromptBank::zeros(cfg.model.vocab, cfg.defense.context_length,
                                    cfg.model.token_dim, cfg.defense.class_position, false)) {}

  AttackRun attack(const std::string& kind) {
    AttackRun run;
    run.cfg = base;
    run.cfg.poison.trigger.kind = trigger_kind_from_string(kind);
    const double t0 = now_s();
    Dataset poisoned = poison_dataset(data.train, run.cfg.poison).data;
    run.model = pretrain(poisoned, run.cfg.model, run.cfg.pretrain_epochs, run.cfg.pretrain_lr,
                         run.cfg.defense.context_length, run.cfg.pretrain_batch)
                    .params;
    run.pretrain_seconds = now_s() - t0;
    run.ca0 = clean_accuracy(run.model, zero_bank, data.test);
    run.asr0 = attack_success_rate(run.model, zero_bank, data.test, run.cfg.poison.trigger,
                                   run.cfg.poison.target_class);
    return run;
  }

  DefenseRun defend(const AttackRun& atk, const DefenseConfig& dc, const Dataset& clean) {
    DefenseRun run;
    PromptBank bank = train_cbpt(atk.model, clean, dc, &run.log);
    run.ca = clean_accuracy(atk.model, bank, data.test);
    run.asr = attack_success_rate(atk.model, bank, data.test, atk.cfg.poison.trigger,
                                  atk.cfg.poison.target_class);
    return run;
  }
};

EncoderConfig fd_config(std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.embed_dim = 5;
  cfg.token_dim = 5;
  cfg.vocab = 4;
  cfg.image_tower_widths = {2};
  cfg.text_tower_widths = {4};
  cfg.seed = seed;
  return cfg;
}

Mat random_images(int rows, int n, Rng& rng, double lo, double hi) {
  Mat m(rows, n);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// FD over the lambda-weighted outer objective; isolates single losses when
// the other weights are zero.
double outer_fd_worst(const DefenseConfig& shape, int instances, std::uint64_t seed) {
  double worst = 0.0;
  Rng rng(seed);
  for (int inst = 0; inst < instances; ++inst) {
    auto params = init_params(fd_config(rng.next()));
    Rng brng(rng.next());
    PromptBank bank =
        PromptBank::gaussian(4, 3, 5, ClassPosition::end, true, 0.05, brng);
    OuterBatch ob;
    const int b = 3;
    ob.anchors = random_images(params.config.pixel_count(), b, rng, 0.2, 0.8);
    ob.deltas.resize(params.config.pixel_count(), b);
    for (int i = 0; i < ob.deltas.size(); ++i) ob.deltas.data()[i] = 0.02 * rng.gaussian();
    for (int i = 0; i < b; ++i) {
      ob.labels.push_back(rng.uniform_int(4));
      int yp = rng.uniform_int(4);
      if (yp == ob.labels.back()) yp = (yp + 1) % 4;
      ob.backdoor_classes.push_back(yp);
    }
    DefenseConfig step = shape;
    step.lr = 1e-3;
    PromptBank stepped = bank;
    outer_step(stepped, params, ob, step);
    DefenseConfig probe = shape;
    probe.lr = 0.0;
    auto loss_at = [&]() {
      PromptBank b2 = bank;
      return outer_step(b2, params, ob, probe).combined;
    };
    std::vector<double> ana, num;
    for (std::size_t k = 0; k < bank.context.size(); ++k)
      for (int i = 0; i < bank.context[k].size(); ++i) {
        ana.push_back((bank.context[k].data()[i] - stepped.context[k].data()[i]) / step.lr);
        num.push_back(oracle::central_diff(loss_at, bank.context[k].data()[i], 1e-5));
      }
    worst = std::max(worst, oracle::max_rel_err(ana, num));
  }
  return worst;
}

}  // namespace

int main() {
  const ExperimentConfig base = parse_config_text("{}");
  Lab lab(base);
  const int target = base.poison.target_class;

  // ---- C1: backdoor implantation --------------------------------------
  AttackRun patch = lab.attack("patch");
  {
    const double t0 = now_s();
    ExperimentConfig clean_cfg = base;
    DualEncoderParams clean_model =
        pretrain(lab.data.train, clean_cfg.model, clean_cfg.pretrain_epochs, clean_cfg.pretrain_lr,
                 clean_cfg.defense.context_length, clean_cfg.pretrain_batch)
            .params;
    const double clean_ca = clean_accuracy(clean_model, lab.zero_bank, lab.data.test);
    const double chance = 1.0 / base.dataset.classes;
    const bool pass = patch.asr0 >= 0.80 && std::abs(patch.ca0 - clean_ca) <= 0.05 &&
                      clean_ca >= chance + 0.20 && patch.pretrain_seconds <= 600.0;
    report("C1 backdoor implantation", pass,
           fmt("poisoned ASR %.4f (>=0.80), CA %.4f vs clean twin %.4f (|diff|<=0.05), "
               "clean CA >= %.2f, pretrain %.0fs (<=600s); twin build %.0fs",
               patch.asr0, patch.ca0, clean_ca, chance + 0.20, patch.pretrain_seconds,
               now_s() - t0));
  }

  // ---- C2: CBPT collapse ----------------------------------------------
  std::map<std::string, AttackRun> attacks;
  attacks.emplace("patch", std::move(patch));
  attacks.emplace("blended", lab.attack("blended"));
  attacks.emplace("sig", lab.attack("sig"));
  std::map<std::string, std::vector<DefenseRun>> c2_runs;
  {
    bool pass = true;
    std::string detail;
    for (const char* kind : {"patch", "blended", "sig"}) {
      const AttackRun& atk = attacks.at(kind);
      int ok = 0;
      for (int s = 0; s < 5; ++s) {
        DefenseConfig dc = base.defense;
        dc.rng_seed = derive_seed(base.seed, "c2-seed-" + std::to_string(s));
        DefenseRun run = lab.defend(atk, dc, lab.shots);
        if (run.asr <= 0.05 && atk.ca0 - run.ca <= 0.02) ++ok;
        c2_runs[kind].push_back(std::move(run));
      }
      detail += fmt("%s %d/5 (undefended ASR %.3f)  ", kind, ok, atk.asr0);
      if (ok < 4) pass = false;
    }
    report("C2 CBPT collapse (ASR<=0.05, CA drop<=0.02, >=4/5 seeds)", pass, detail);
  }

  // ---- C3: baseline ordering ------------------------------------------
  {
    const AttackRun& atk = attacks.at("patch");
    auto ft = baseline_ft(atk.model, lab.shots, base.defense.epochs, base.ft_lr,
                          base.defense.context_length, base.defense.batch_size,
                          base.defense.rng_seed);
    auto cc = baseline_cleanclip(atk.model, lab.shots, base.defense.epochs, base.ft_lr,
                                 base.aug_strength, base.ss_weight, base.defense.context_length,
                                 base.defense.batch_size, base.defense.rng_seed);
    const double asr_ft = attack_success_rate(ft.params, lab.zero_bank, lab.data.test,
                                              atk.cfg.poison.trigger, target);
    const double asr_cc = attack_success_rate(cc.params, lab.zero_bank, lab.data.test,
                                              atk.cfg.poison.trigger, target);
    const double ca_ft = clean_accuracy(ft.params, lab.zero_bank, lab.data.test);
    const double ca_cc = clean_accuracy(cc.params, lab.zero_bank, lab.data.test);
    const double asr_cbpt = c2_runs.at("patch")[0].asr;
    const bool order = asr_cbpt <= asr_cc + 0.02 && asr_cc <= asr_ft + 0.02;
    // utility-preservation property: defended CA within 0.05 of the
    // undefended poisoned model's CA
    const bool utility = std::abs(ca_ft - atk.ca0) <= 0.05 && std::abs(ca_cc - atk.ca0) <= 0.05 &&
                         std::abs(c2_runs.at("patch")[0].ca - atk.ca0) <= 0.05;
    report("C3 baseline ordering (cbpt <= cleanclip <= ft, slack 0.02)", order && utility,
           fmt("ASR cbpt %.4f cleanclip %.4f ft %.4f | CA cbpt %.4f cleanclip %.4f ft %.4f "
               "(utility within 0.05 of %.4f: %s)",
               asr_cbpt, asr_cc, asr_ft, c2_runs.at("patch")[0].ca, ca_cc, ca_ft, atk.ca0,
               utility ? "yes" : "no"));
  }

  // ---- C4: gradient fidelity suite ------------------------------------
  {
    Rng rng(20250810);
    double worst_clip = 0.0;
    for (int inst = 0; inst < 20; ++inst) {
      auto params = init_params(fd_config(rng.next()));
      Mat imgs = random_images(params.config.pixel_count(), 2, rng, 0.2, 0.8);
      std::vector<int> labels = {rng.uniform_int(4), rng.uniform_int(4)};
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
      worst_clip = std::max(worst_clip, oracle::max_rel_err(ana, num));
    }

    double worst_inv = 0.0;
    for (int inst = 0; inst < 20; ++inst) {
      auto params = init_params(fd_config(rng.next()));
      Vec v = random_images(params.config.pixel_count(), 1, rng, 0.2, 0.8).col(0);
      Vec delta(v.size());
      for (int i = 0; i < delta.size(); ++i) delta(i) = 0.01 * rng.gaussian();
      Vec e_pos = encode_image(params, random_images(params.config.pixel_count(), 1, rng, 0.2, 0.8));
      Vec e_neg = encode_image(params, v);
      Vec grad;
      inversion_loss_grad(params, v, delta, e_pos, e_neg, &grad);
      std::vector<double> ana, num;
      auto f = [&]() { return inversion_loss_grad(params, v, delta, e_pos, e_neg, nullptr); };
      for (int i = 0; i < delta.size(); ++i) {
        ana.push_back(grad(i));
        num.push_back(oracle::central_diff(f, delta(i), 1e-6));
      }
      worst_inv = std::max(worst_inv, oracle::max_rel_err(ana, num));
    }

    DefenseConfig adv_only, align_only, benign_only, combo;
    adv_only.lambda1 = 1.0; adv_only.lambda2 = 0.0; adv_only.lambda3 = 0.0; adv_only.alpha = 0.0;
    align_only.lambda1 = 0.0; align_only.lambda2 = 1.0; align_only.lambda3 = 0.0; align_only.alpha = 0.0;
    benign_only.lambda1 = 0.0; benign_only.lambda2 = 0.0; benign_only.lambda3 = 1.0;
    const double worst_adv = outer_fd_worst(adv_only, 20, 101);
    const double worst_align = outer_fd_worst(align_only, 20, 103);
    const double worst_benign = outer_fd_worst(benign_only, 20, 107);
    const double worst_combo = outer_fd_worst(combo, 20, 109);

    const double worst = std::max({worst_clip, worst_inv, worst_adv, worst_align, worst_benign,
                                   worst_combo});
    report("C4 gradient fidelity (rel err <= 1e-4, 20+ instances each)", worst <= 1e-4,
           fmt("max rel err: contrastive %.2e inversion %.2e adv %.2e align %.2e benign %.2e "
               "combined %.2e",
               worst_clip, worst_inv, worst_adv, worst_align, worst_benign, worst_combo));
  }

  // ---- C5: constraint suite -------------------------------------------
  {
    long long steps = 0, budget_viol = 0, range_viol = 0, yprime_viol = 0, calls = 0;
    for (const auto& [kind, runs] : c2_runs)
      for (const auto& run : runs) {
        steps += run.log.stats.inner_steps;
        calls += run.log.stats.inversion_calls;
        budget_viol += run.log.stats.budget_violations;
        range_viol += run.log.stats.range_violations;
        yprime_viol += run.log.stats.backdoor_class_violations;
      }
    // direct y' checks on random embeddings
    Rng rng(555);
    int y_bad = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 2 + rng.uniform_int(10);
      Mat embs(6, n);
      for (int i = 0; i < embs.size(); ++i) embs.data()[i] = rng.gaussian();
      for (int j = 0; j < n; ++j) embs.col(j) /= embs.col(j).norm();
      Vec a(6);
      for (int i = 0; i < 6; ++i) a(i) = rng.gaussian();
      a /= a.norm();
      const int y = rng.uniform_int(n);
      if (approximate_backdoor_class_from(embs, a, y) == y) ++y_bad;
    }
    // probability vectors sum to one
    auto params = init_params(fd_config(rng.next()));
    PromptBank bank = PromptBank::zeros(4, 3, 5);
    double worst_sum = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Vec img = random_images(params.config.pixel_count(), 1, rng, 0.0, 1.0).col(0);
      worst_sum = std::max(worst_sum,
                           std::abs(class_probabilities(params, bank, img).sum() - 1.0));
    }
    const bool pass =
        budget_viol == 0 && range_viol == 0 && yprime_viol == 0 && y_bad == 0 && worst_sum <= 1e-6 &&
        steps > 0;
    report("C5 constraint suite", pass,
           fmt("%lld inner steps across %lld inversions: budget violations %lld, range "
               "violations %lld, y' violations %lld+%d, max |sum(p)-1| %.1e",
               steps, calls, budget_viol, range_viol, yprime_viol, y_bad, worst_sum));
  }

  // ---- C6: oracle equivalence -----------------------------------------
  {
    Rng rng(777);
    double worst = 0.0;
    // contrastive loss vs direct summation on oracle embeddings
    for (int inst = 0; inst < 5; ++inst) {
      auto params = init_params(fd_config(rng.next()));
      const int n = 3 + inst % 3;
      Mat imgs = random_images(params.config.pixel_count(), n, rng, 0.0, 1.0);
      std::vector<Mat> caps;
      Mat e_img(params.config.embed_dim, n), e_txt(params.config.embed_dim, n);
      for (int i = 0; i < n; ++i) {
        Mat cap(3, params.config.token_dim);
        for (int j = 0; j < cap.size(); ++j) cap.data()[j] = rng.gaussian();
        caps.push_back(cap);
        e_img.col(i) = oracle::image_forward(params, imgs.col(i));
        e_txt.col(i) = oracle::text_forward(params, cap);
      }
      worst = std::max(worst, std::abs(contrastive_pretrain_loss(params, imgs, caps) -
                                       oracle::infonce(e_img, e_txt, params.config.temperature)));
    }
    // softmax probabilities vs scalar oracle
    {
      const Vec p = softmax(Vec((Vec(3) << 0.9, 0.1, -0.2).finished()));
      const auto q = oracle::softmax({0.9, 0.1, -0.2});
      for (int i = 0; i < 3; ++i) worst = std::max(worst, std::abs(p(i) - q[i]));
    }
    // inversion loss vs straight-line composition
    for (int inst = 0; inst < 5; ++inst) {
      auto params = init_params(fd_config(rng.next()));
      Vec v = random_images(params.config.pixel_count(), 1, rng, 0.0, 1.0).col(0);
      Vec d(v.size());
      for (int i = 0; i < d.size(); ++i) d(i) = 0.05 * rng.gaussian();
      Vec pos = random_images(params.config.pixel_count(), 1, rng, 0.0, 1.0).col(0);
      Vec neg = random_images(params.config.pixel_count(), 1, rng, 0.0, 1.0).col(0);
      Vec x = clamp01(v + d);
      const Vec e = oracle::image_forward(params, x);
      const double expect =
          e.dot(oracle::image_forward(params, neg)) - e.dot(oracle::image_forward(params, pos));
      worst = std::max(worst, std::abs(inversion_loss(params, v, d, pos, neg) - expect));
    }
    // defense losses vs scalar arithmetic
    {
      Vec hot(4), uni = Vec::Constant(4, 0.25);
      hot << 0.9, 0.05, 0.03, 0.02;
      worst = std::max(worst, std::abs(adv_loss(hot, 0) - 2.3025850929940455));
      Vec a(2), b(2);
      a << 1.0, 0.0;
      b << 0.0, 1.0;
      worst = std::max(worst, std::abs(align_loss(a, b, 0) - std::sqrt(2.0)));
      Vec c(2), d2(2);
      c << 0.5, 0.5;
      d2 << 0.25, 0.75;
      worst = std::max(worst,
                       std::abs(benign_loss(c, d2, 0, 0.1) -
                                (-std::log(0.5) - 0.1 * std::log(0.25))));
    }
    report("C6 oracle equivalence (<= 1e-8)", worst <= 1e-8, fmt("max |difference| %.2e", worst));
  }

  // ---- C7: ablation directions ----------------------------------------
  {
    const AttackRun& atk = attacks.at("patch");
    DefenseConfig dc = base.defense;
    dc.rng_seed = derive_seed(base.seed, "c2-seed-0");
    const double asr_far = c2_runs.at("patch")[0].asr;
    DefenseConfig rand_dc = dc;
    rand_dc.positive_strategy = PositiveStrategy::random;
    const double asr_rand = lab.defend(atk, rand_dc, lab.shots).asr;
    DefenseConfig close_dc = dc;
    close_dc.positive_strategy = PositiveStrategy::closest;
    const double asr_close = lab.defend(atk, close_dc, lab.shots).asr;
    DefenseConfig unified_dc = dc;
    unified_dc.class_wise = false;
    const double asr_unified = lab.defend(atk, unified_dc, lab.shots).asr;
    Dataset one_shot = sample_shots(lab.data.train, 1, derive_seed(base.seed, "clean-shots"));
    const double asr_one = lab.defend(atk, dc, one_shot).asr;

    const bool strategies = asr_far <= asr_rand + 0.05 && asr_rand <= asr_close + 0.05;
    const bool class_wise = asr_far <= asr_unified;
    const bool one = asr_one <= 0.15;
    report("C7 ablation directions", strategies && class_wise && one,
           fmt("ASR farthest %.4f <= random %.4f <= closest %.4f (+0.05 slack); class-wise %.4f "
               "<= unified %.4f; 1-shot %.4f <= 0.15",
               asr_far, asr_rand, asr_close, asr_far, asr_unified, asr_one));
  }

  // ---- C8: pipeline determinism ---------------------------------------
  {
    const char* small_cfg = R"({
      "run_dir": "%ROOT%",
      "dataset": {"classes": 4, "train_per_class": 30, "test_per_class": 8, "image_size": 8, "channels": 1},
      "model": {"embed_dim": 6, "image_tower_widths": [2], "text_tower_widths": [4], "epochs": 3, "lr": 1e-3},
      "attack": {"target_class": 1, "poison_rate": 0.1},
      "defense": {"name": "cbpt", "epochs": 3, "warmup_epochs": 1, "shots": 4, "context_length": 2}
    })";
    auto run_once = [&](const std::string& root) {
      std::string text = small_cfg;
      text.replace(text.find("%ROOT%"), 6, root);
      ExperimentConfig cfg = parse_config_text(text);
      const std::string rundir = run_pipeline(cfg);
      std::ifstream in(fs::path(rundir) / cfg.report_name, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      return ss.str();
    };
    const fs::path root = fs::temp_directory_path() / "cbpt_acceptance_c8";
    fs::remove_all(root);
    const std::string r1 = run_once((root / "a").string());
    const std::string r2 = run_once((root / "b").string());
    fs::remove_all(root);
    report("C8 pipeline determinism (byte-identical reports)", !r1.empty() && r1 == r2,
           fmt("report bytes %zu vs %zu, %s", r1.size(), r2.size(),
               r1 == r2 ? "identical" : "DIFFER"));
  }

  std::printf("%s\n", g_failures == 0 ? "acceptance: all criteria passed"
                                      : "acceptance: FAILURES present");
  return g_failures == 0 ? 0 : 1;
}
