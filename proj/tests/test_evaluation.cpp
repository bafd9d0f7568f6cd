#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cbpt/evaluation.hpp"

using namespace cbpt;

namespace {

// small end-to-end configuration used by the heavier cells
const char* kSmallConfig = R"({
  "dataset": {"classes": 4, "train_per_class": 30, "test_per_class": 8, "image_size": 8, "channels": 1},
  "model": {"embed_dim": 6, "image_tower_widths": [2], "text_tower_widths": [4], "epochs": 3, "lr": 1e-3},
  "attack": {"target_class": 1, "poison_rate": 0.1},
  "defense": {"epochs": 3, "warmup_epochs": 1, "shots": 4, "context_length": 2}
})";

EncoderConfig mini_config() {
  EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.embed_dim = 6;
  cfg.token_dim = 6;
  cfg.vocab = 4;
  cfg.image_tower_widths = {2};
  cfg.text_tower_widths = {4};
  cfg.seed = 207;
  return cfg;
}

ToySplits mini_data() {
  ToyDataSpec spec;
  spec.classes = 4;
  spec.train_per_class = 10;
  spec.test_per_class = 5;
  spec.image_size = 8;
  spec.channels = 1;
  spec.seed = 401;
  return make_toy_dataset(spec);
}

// identical class tokens make every similarity tie, so every prediction is
// class 0 under the lowest-index rule
DualEncoderParams constant_classifier() {
  auto params = init_params(mini_config());
  for (int r = 1; r < params.class_tokens.rows(); ++r)
    params.class_tokens.row(r) = params.class_tokens.row(0);
  return params;
}

}  // namespace

TEST_CASE("clean_accuracy: perfect subset, constant classifier, counting oracle") {
  auto data = mini_data();
  auto trained = pretrain(data.train, mini_config(), 4, 1e-3, 2, 10);
  PromptBank bank = PromptBank::zeros(4, 2, 6);

  // subset the model gets right scores exactly 1.0
  const Mat text_embs = text_embeddings(trained.params, bank);
  auto pred = classify_batch(trained.params, text_embs, data.test.images);
  std::vector<int> right;
  for (int i = 0; i < data.test.size(); ++i)
    if (pred[i] == data.test.labels[i]) right.push_back(i);
  REQUIRE(!right.empty());
  Dataset perfect;
  perfect.channels = data.test.channels;
  perfect.image_size = data.test.image_size;
  perfect.images.resize(data.test.images.rows(), static_cast<Eigen::Index>(right.size()));
  perfect.labels.resize(right.size());
  for (std::size_t k = 0; k < right.size(); ++k) {
    perfect.images.col(k) = data.test.images.col(right[k]);
    perfect.labels[k] = data.test.labels[right[k]];
  }
  CHECK(clean_accuracy(trained.params, bank, perfect) == doctest::Approx(1.0));

  // constant classifier on a balanced 4-class set scores 1/4
  auto constant = constant_classifier();
  CHECK(clean_accuracy(constant, bank, data.test) == doctest::Approx(0.25));

  // matches a manual prediction loop
  int hits = 0;
  for (int i = 0; i < data.test.size(); ++i)
    if (zero_shot_classify(trained.params, bank, Vec(data.test.images.col(i))) ==
        data.test.labels[i])
      ++hits;
  CHECK(clean_accuracy(trained.params, bank, data.test) ==
        doctest::Approx(static_cast<double>(hits) / data.test.size()));

  Dataset empty;
  empty.images.resize(data.test.images.rows(), 0);
  CHECK_THROWS_AS(clean_accuracy(trained.params, bank, empty), ContractError);
}

TEST_CASE("attack_success_rate: extremes and counting oracle") {
  auto data = mini_data();
  PromptBank bank = PromptBank::zeros(4, 2, 6);
  TriggerSpec trig;
  trig.kind = TriggerKind::patch;

  // constant classifier: everything lands on class 0
  auto constant = constant_classifier();
  CHECK(attack_success_rate(constant, bank, data.test, trig, 0) == doctest::Approx(1.0));
  CHECK(attack_success_rate(constant, bank, data.test, trig, 2) == doctest::Approx(0.0));

  // counting oracle on a trained model
  auto trained = pretrain(data.train, mini_config(), 4, 1e-3, 2, 10);
  const Dataset triggered = triggered_testset(data.test, trig, 1);
  int hits = 0;
  for (int i = 0; i < triggered.size(); ++i)
    if (zero_shot_classify(trained.params, bank, Vec(triggered.images.col(i))) == 1) ++hits;
  CHECK(attack_success_rate(trained.params, bank, data.test, trig, 1) ==
        doctest::Approx(static_cast<double>(hits) / triggered.size()));

  // a testset with only the target class cannot measure ASR
  Dataset only_t = data.test;
  only_t.labels.assign(only_t.labels.size(), 2);
  CHECK_THROWS_AS(attack_success_rate(trained.params, bank, only_t, trig, 2), ContractError);
}

TEST_CASE("report: serialization round-trips bit-exactly") {
  EvalReport report;
  report.kind = "matrix";
  report.seed = 42;
  report.config_digest = "abc123";
  report.cells.push_back({"patch", "cbpt", 0.98765, 0.01234, 1000, 900, ""});
  report.cells.push_back({"sig", "ft", 0.91, 0.5, 1000, 900, ""});
  report.cells.push_back({"blended", "none", 0.0, 0.0, 10, 9, "pretrain: non-finite loss"});
  const std::string text = serialize_report(report);
  const EvalReport parsed = parse_report_text(text);
  CHECK(serialize_report(parsed) == text);
  CHECK(parsed.cells.size() == 3);
  CHECK(parsed.cells[0].ca == doctest::Approx(0.9877));  // 4 decimal places
  CHECK(parsed.cells[2].error == "pretrain: non-finite loss");
}

TEST_CASE("report: percent rendering fixture") {
  CHECK(render_cell_percent("BadNet", 0.5883, 0.9651) == "BadNet CA 58.83 / ASR 96.51");
}

TEST_CASE("run_matrix: one cell per pair, deterministic bytes, isolated failures") {
  ExperimentConfig cfg = parse_config_text(kSmallConfig);
  EvalReport r1 = run_matrix({"patch"}, {"none"}, cfg);
  CHECK(r1.cells.size() == 1);
  CHECK(r1.cells[0].error.empty());
  CHECK(r1.cells[0].n_clean == 32);
  CHECK(r1.cells[0].n_triggered == 24);
  CHECK(r1.cells[0].asr >= 0.0);
  CHECK(r1.cells[0].ca <= 1.0);

  EvalReport r2 = run_matrix({"patch"}, {"none"}, cfg);
  CHECK(serialize_report(r1) == serialize_report(r2));  // same seeds, same bytes

  // an impossible defense config fails its own cell only
  ExperimentConfig broken = cfg;
  broken.defense.shots = 1000;  // more shots than the pool holds
  EvalReport r3 = run_matrix({"patch"}, {"none", "cbpt"}, broken);
  CHECK(r3.cells.size() == 2);
  CHECK(r3.cells[0].error.empty());
  CHECK(!r3.cells[1].error.empty());

  CHECK_THROWS_AS(run_matrix({}, {"none"}, cfg), ContractError);
}

TEST_CASE("run_ablation: axis enumeration and shot counts") {
  ExperimentConfig cfg = parse_config_text(kSmallConfig);
  cfg.defense.epochs = 2;
  cfg.defense.warmup_epochs = 2;  // keep the sweep quick: warm-up only
  EvalReport report = run_ablation("context_length", cfg);
  CHECK(report.kind == "ablation");
  CHECK(report.axis == "context_length");
  REQUIRE(report.cells.size() == 5);
  const char* expected[] = {"cbpt[context_length=1]", "cbpt[context_length=2]",
                            "cbpt[context_length=4]", "cbpt[context_length=8]",
                            "cbpt[context_length=16]"};
  for (int i = 0; i < 5; ++i) CHECK(report.cells[i].defense == expected[i]);

  CHECK_THROWS_AS(run_ablation("nonsense", cfg), ContractError);
  ExperimentConfig no_attack = cfg;
  no_attack.attack_enabled = false;
  CHECK_THROWS_AS(run_ablation("shots", no_attack), ContractError);

  // the shots axis definition: exactly k images per class
  Dataset pool = make_toy_dataset(cfg.dataset).train;
  for (int k : {1, 2, 4}) {
    Dataset s = sample_shots(pool, k, 99);
    CHECK(s.size() == k * cfg.dataset.classes);
    auto by_class = indices_by_class(s, cfg.dataset.classes);
    for (const auto& cls : by_class) CHECK(static_cast<int>(cls.size()) == k);
  }
}

TEST_CASE("run_defense: unknown name rejected, none is identity") {
  ExperimentConfig cfg = parse_config_text(kSmallConfig);
  auto data = mini_data();
  auto trained = pretrain(data.train, mini_config(), 2, 1e-3, 2, 10);
  CHECK_THROWS_AS(run_defense("bogus", trained.params, data.train, cfg), ConfigError);
  auto none = run_defense("none", trained.params, data.train, cfg);
  CHECK(params_digest(none.params) == params_digest(trained.params));
  for (const Mat& c : none.bank.context) CHECK(c.norm() == 0.0);
}
