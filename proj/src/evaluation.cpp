#include "cbpt/evaluation.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cbpt/sha256.hpp"

namespace cbpt {

using json = nlohmann::ordered_json;

double clean_accuracy(const DualEncoderParams& params, const PromptBank& bank,
                      const Dataset& testset) {
  if (testset.size() == 0) throw ContractError("clean_accuracy: empty testset");
  const Mat text_embs = text_embeddings(params, bank);
  const auto pred = classify_batch(params, text_embs, testset.images);
  int hit = 0;
  for (int i = 0; i < testset.size(); ++i)
    if (pred[i] == testset.labels[i]) ++hit;
  return static_cast<double>(hit) / testset.size();
}

double attack_success_rate(const DualEncoderParams& params, const PromptBank& bank,
                           const Dataset& testset, const TriggerSpec& trigger, int target_class) {
  const Dataset triggered = triggered_testset(testset, trigger, target_class);
  if (triggered.size() == 0)
    throw ContractError("attack_success_rate: no non-target-class test images");
  for (int label : triggered.labels)
    if (label == target_class)
      throw ContractError("attack_success_rate: target-class original leaked into triggered set");
  const Mat text_embs = text_embeddings(params, bank);
  const auto pred = classify_batch(params, text_embs, triggered.images);
  int hit = 0;
  for (int p : pred)
    if (p == target_class) ++hit;
  return static_cast<double>(hit) / triggered.size();
}

namespace {

double round4(double v) { return std::round(v * 1e4) / 1e4; }

}  // namespace

std::string serialize_report(const EvalReport& report) {
  json root;
  root["schema"] = "cbpt-report-v1";
  root["kind"] = report.kind;
  root["axis"] = report.axis;
  root["seed"] = report.seed;
  root["config_digest"] = report.config_digest;
  json cells = json::array();
  for (const auto& c : report.cells) {
    json cell;
    cell["attack"] = c.attack;
    cell["defense"] = c.defense;
    cell["ca"] = round4(c.ca);
    cell["asr"] = round4(c.asr);
    cell["n_clean"] = c.n_clean;
    cell["n_triggered"] = c.n_triggered;
    cell["error"] = c.error;
    cells.push_back(cell);
  }
  root["cells"] = cells;
  return root.dump(2) + "\n";
}

EvalReport parse_report_text(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("report parse error: ") + e.what());
  }
  if (!root.contains("schema") || root.at("schema").get<std::string>() != "cbpt-report-v1")
    throw ConfigError("report schema mismatch (expected cbpt-report-v1)");
  EvalReport report;
  report.kind = root.at("kind").get<std::string>();
  report.axis = root.at("axis").get<std::string>();
  report.seed = root.at("seed").get<std::uint64_t>();
  report.config_digest = root.at("config_digest").get<std::string>();
  for (const auto& c : root.at("cells")) {
    EvalCell cell;
    cell.attack = c.at("attack").get<std::string>();
    cell.defense = c.at("defense").get<std::string>();
    cell.ca = c.at("ca").get<double>();
    cell.asr = c.at("asr").get<double>();
    cell.n_clean = c.at("n_clean").get<int>();
    cell.n_triggered = c.at("n_triggered").get<int>();
    cell.error = c.at("error").get<std::string>();
    report.cells.push_back(cell);
  }
  return report;
}

EvalReport parse_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("report not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_report_text(ss.str());
}

std::string render_cell_percent(const std::string& name, double ca, double asr) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s CA %.2f / ASR %.2f", name.c_str(), 100.0 * ca, 100.0 * asr);
  return buf;
}

DefenseOutcome run_defense(const std::string& defense_name, const DualEncoderParams& suspicious,
                           const Dataset& clean_shots, const ExperimentConfig& cfg) {
  DefenseOutcome out{suspicious,
                     PromptBank::zeros(suspicious.config.vocab, cfg.defense.context_length,
                                       suspicious.config.token_dim, cfg.defense.class_position,
                                       false),
                     {}};
  if (defense_name == "none") return out;
  if (defense_name == "cbpt") {
    out.bank = train_cbpt(suspicious, clean_shots, cfg.defense, &out.log, {}, cfg.workers);
    return out;
  }
  if (defense_name == "ft") {
    out.params = baseline_ft(suspicious, clean_shots, cfg.defense.epochs, cfg.ft_lr,
                             cfg.defense.context_length, cfg.defense.batch_size,
                             cfg.defense.rng_seed)
                     .params;
    return out;
  }
  if (defense_name == "cleanclip") {
    out.params = baseline_cleanclip(suspicious, clean_shots, cfg.defense.epochs, cfg.ft_lr,
                                    cfg.aug_strength, cfg.ss_weight, cfg.defense.context_length,
                                    cfg.defense.batch_size, cfg.defense.rng_seed)
                     .params;
    return out;
  }
  throw ConfigError("unknown defense '" + defense_name + "'");
}

namespace {

// Re-derives every stage seed from the cell seed so cells are independent
// while staying reproducible.
void reseed(ExperimentConfig& cfg, std::uint64_t cell_seed) {
  cfg.seed = cell_seed;
  cfg.dataset.seed = derive_seed(cell_seed, "dataset");
  cfg.model.seed = derive_seed(cell_seed, "model");
  cfg.poison.rng_seed = derive_seed(cell_seed, "poison");
  cfg.defense.rng_seed = derive_seed(cell_seed, "defense");
}

EvalCell run_cell_config(const ExperimentConfig& cfg, const std::string& attack_label,
                         const std::string& defense_label, double* runtime_s) {
  EvalCell cell;
  cell.attack = attack_label;
  cell.defense = defense_label;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const ToySplits data = make_toy_dataset(cfg.dataset);
    Dataset train = data.train;
    if (cfg.attack_enabled) train = poison_dataset(train, cfg.poison).data;
    const auto pre = pretrain(train, cfg.model, cfg.pretrain_epochs, cfg.pretrain_lr,
                              cfg.defense.context_length, cfg.pretrain_batch);
    Dataset shots;
    if (cfg.defense_name != "none")
      shots = sample_shots(data.train, cfg.defense.shots, derive_seed(cfg.seed, "clean-shots"));
    const DefenseOutcome defended = run_defense(cfg.defense_name, pre.params, shots, cfg);
    cell.ca = clean_accuracy(defended.params, defended.bank, data.test);
    cell.n_clean = data.test.size();
    if (cfg.attack_enabled) {
      const Dataset triggered =
          triggered_testset(data.test, cfg.poison.trigger, cfg.poison.target_class);
      cell.n_triggered = triggered.size();
      cell.asr = attack_success_rate(defended.params, defended.bank, data.test, cfg.poison.trigger,
                                     cfg.poison.target_class);
    }
  } catch (const std::exception& e) {
    cell.error = e.what();
  }
  if (runtime_s)
    *runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return cell;
}

}  // namespace

EvalCell run_cell(const ExperimentConfig& base, const std::string& attack_name,
                  const std::string& defense_label, double* runtime_s) {
  ExperimentConfig cfg = base;
  reseed(cfg, seed_from_strings(base.seed, attack_name, defense_label));
  if (attack_name == "none") {
    cfg.attack_enabled = false;
  } else {
    cfg.attack_enabled = true;
    cfg.poison.trigger.kind = trigger_kind_from_string(attack_name);
  }
  cfg.defense_name = defense_label;
  return run_cell_config(cfg, attack_name, defense_label, runtime_s);
}

EvalReport run_matrix(const std::vector<std::string>& attacks,
                      const std::vector<std::string>& defenses, const ExperimentConfig& shared) {
  if (attacks.empty() || defenses.empty())
    throw ContractError("run_matrix: attack and defense lists must be non-empty");
  EvalReport report;
  report.kind = "matrix";
  report.seed = shared.seed;
  report.config_digest = config_digest(shared);
  for (const auto& attack : attacks)
    for (const auto& defense : defenses) {
      double rt = 0.0;
      report.cells.push_back(run_cell(shared, attack, defense, &rt));
      report.runtime_seconds[attack + "/" + defense] = rt;
    }
  return report;
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"positive_strategy", "context_length",
                                                "class_position", "class_wise", "shots"};
  return axes;
}

EvalReport run_ablation(const std::string& axis, const ExperimentConfig& base) {
  if (!base.attack_enabled) throw ContractError("run_ablation: needs an enabled attack");
  const std::string attack_name = to_string(base.poison.trigger.kind);

  struct Variant {
    std::string label;
    ExperimentConfig cfg;
  };
  std::vector<Variant> variants;
  auto with = [&](const std::string& value, auto&& mutate) {
    Variant v{"cbpt[" + axis + "=" + value + "]", base};
    v.cfg.defense_name = "cbpt";
    mutate(v.cfg);
    variants.push_back(std::move(v));
  };

  if (axis == "positive_strategy") {
    for (const char* s : {"farthest", "random", "closest"})
      with(s, [&](ExperimentConfig& c) {
        c.defense.positive_strategy = positive_strategy_from_string(s);
      });
  } else if (axis == "context_length") {
    for (int m : {1, 2, 4, 8, 16})
      with(std::to_string(m), [&](ExperimentConfig& c) { c.defense.context_length = m; });
  } else if (axis == "class_position") {
    for (const char* p : {"front", "middle", "end"})
      with(p, [&](ExperimentConfig& c) { c.defense.class_position = class_position_from_string(p); });
  } else if (axis == "class_wise") {
    for (bool cw : {true, false})
      with(cw ? "true" : "false", [&](ExperimentConfig& c) { c.defense.class_wise = cw; });
  } else if (axis == "shots") {
    for (int s : {1, 2, 4, 8, 16})
      with(std::to_string(s), [&](ExperimentConfig& c) { c.defense.shots = s; });
  } else {
    throw ContractError("run_ablation: unknown axis '" + axis + "'");
  }

  EvalReport report;
  report.kind = "ablation";
  report.axis = axis;
  report.seed = base.seed;
  report.config_digest = config_digest(base);
  for (auto& v : variants) {
    reseed(v.cfg, seed_from_strings(base.seed, attack_name, v.label));
    double rt = 0.0;
    report.cells.push_back(run_cell_config(v.cfg, attack_name, v.label, &rt));
    report.runtime_seconds[attack_name + "/" + v.label] = rt;
  }
  return report;
}

}  // namespace cbpt
