#include "cbpt/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cbpt/checkpoint.hpp"
#include "cbpt/plots.hpp"
#include "cbpt/sha256.hpp"

namespace cbpt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string dataset_digest(const Dataset& ds) {
  Sha256 h;
  h.update(ds.images.data(), sizeof(double) * ds.images.size());
  h.update(ds.labels.data(), sizeof(int) * ds.labels.size());
  return h.hex_digest();
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << content;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_digest(const fs::path& path) {
  const std::string bytes = read_text(path);
  return sha256_hex(bytes);
}

// resume path for a skipped stage; must exist
fs::path resolve_resume(const ExperimentConfig& cfg, const fs::path& rundir,
                        const std::string& stage, const char* default_name) {
  fs::path p;
  auto it = cfg.resume.find(stage);
  if (it != cfg.resume.end() && !it->second.empty())
    p = it->second;
  else
    p = rundir / default_name;
  if (!fs::exists(p))
    throw ConfigError("stage '" + stage + "' is skipped but its checkpoint does not exist: " +
                      p.string());
  return p;
}

struct StageTimer {
  std::map<std::string, double>& sink;
  std::string stage;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  ~StageTimer() {
    sink[stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

}  // namespace

std::string run_directory(const ExperimentConfig& cfg) {
  return (fs::path(cfg.run_dir) / config_digest(cfg).substr(0, 12)).string();
}

std::string run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path rundir = run_directory(cfg);
  fs::create_directories(rundir);

  std::map<std::string, double> wall_times;
  std::map<std::string, double> cell_runtimes;
  bool ran_any = false;
  std::string current_stage;

  try {
    // ---- data (regenerated deterministically; the poison artifact pins it)
    const ToySplits data = make_toy_dataset(cfg.dataset);
    Dataset train = data.train;
    std::vector<int> poisoned_indices;

    current_stage = "poison";
    if (cfg.stage_run.at("poison")) {
      StageTimer timer{wall_times, "poison"};
      ran_any = true;
      if (cfg.attack_enabled) {
        PoisonOutcome out = poison_dataset(train, cfg.poison);
        train = std::move(out.data);
        poisoned_indices = std::move(out.poisoned_indices);
      }
      json pj;
      pj["schema"] = "cbpt-poison-v1";
      pj["enabled"] = cfg.attack_enabled;
      pj["poisoned_indices"] = poisoned_indices;
      pj["train_digest"] = dataset_digest(train);
      write_text(rundir / artifact::poison, pj.dump(2) + "\n");
    } else {
      const fs::path p = resolve_resume(cfg, rundir, "poison", artifact::poison);
      json pj;
      try {
        pj = json::parse(read_text(p));
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("corrupt poison artifact " + p.string() + ": " + e.what());
      }
      if (pj.at("enabled").get<bool>() != cfg.attack_enabled)
        throw ContractError("poison artifact does not match config (attack enabled flag)");
      if (cfg.attack_enabled) {
        PoisonOutcome out = poison_dataset(train, cfg.poison);
        train = std::move(out.data);
        poisoned_indices = std::move(out.poisoned_indices);
      }
      if (pj.at("train_digest").get<std::string>() != dataset_digest(train))
        throw ContractError("poison artifact digest mismatch; config or data changed since " +
                            p.string());
    }

    // ---- pretrain
    current_stage = "pretrain";
    DualEncoderParams model;
    if (cfg.stage_run.at("pretrain")) {
      StageTimer timer{wall_times, "pretrain"};
      ran_any = true;
      model = pretrain(train, cfg.model, cfg.pretrain_epochs, cfg.pretrain_lr,
                       cfg.defense.context_length, cfg.pretrain_batch)
                  .params;
      save_params((rundir / artifact::model).string(), model);
    } else {
      model = load_params(resolve_resume(cfg, rundir, "pretrain", artifact::model).string());
    }

    // ---- defend
    current_stage = "defend";
    DefenseOutcome defended{model,
                            PromptBank::zeros(model.config.vocab, cfg.defense.context_length,
                                              model.config.token_dim, cfg.defense.class_position,
                                              false),
                            {}};
    if (cfg.stage_run.at("defend")) {
      StageTimer timer{wall_times, "defend"};
      ran_any = true;
      if (cfg.defense_name == "cbpt") {
        // epoch monitor: embeddings of the frozen model are cached, so per-
        // epoch CA/ASR tracking only re-encodes the prompts
        const Mat test_embs = encode_image(model, data.test.images);
        Mat trig_embs;
        Dataset triggered;
        if (cfg.attack_enabled) {
          triggered = triggered_testset(data.test, cfg.poison.trigger, cfg.poison.target_class);
          trig_embs = encode_image(model, triggered.images);
        }
        EpochMonitor monitor = [&](int, const PromptBank& bank, EpochLog& log) {
          const Mat text_embs = text_embeddings(model, bank);
          const Mat sims = text_embs.transpose() * test_embs;
          int hit = 0;
          for (int i = 0; i < sims.cols(); ++i)
            if (argmax_lowest(sims.col(i)) == data.test.labels[i]) ++hit;
          log.ca = static_cast<double>(hit) / data.test.size();
          if (cfg.attack_enabled && triggered.size() > 0) {
            const Mat tsims = text_embs.transpose() * trig_embs;
            int t_hit = 0;
            for (int i = 0; i < tsims.cols(); ++i)
              if (argmax_lowest(tsims.col(i)) == cfg.poison.target_class) ++t_hit;
            log.asr = static_cast<double>(t_hit) / triggered.size();
          }
        };
        defended.bank = train_cbpt(model, sample_shots(data.train, cfg.defense.shots,
                                                       derive_seed(cfg.seed, "clean-shots")),
                                   cfg.defense, &defended.log, monitor, cfg.workers);
      } else if (cfg.defense_name != "none") {
        defended = run_defense(cfg.defense_name, model,
                               sample_shots(data.train, cfg.defense.shots,
                                            derive_seed(cfg.seed, "clean-shots")),
                               cfg);
        save_params((rundir / artifact::defended_model).string(), defended.params);
      }
      save_bank((rundir / artifact::bank).string(), defended.bank);
      json dl;
      dl["schema"] = "cbpt-defense-log-v1";
      dl["defense"] = cfg.defense_name;
      json epochs = json::array();
      for (const auto& e : defended.log.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"loss_adv", e.mean_loss.adv},
                          {"loss_align", e.mean_loss.align},
                          {"loss_benign", e.mean_loss.benign},
                          {"loss_combined", e.mean_loss.combined},
                          {"clean_train_acc", e.clean_train_acc},
                          {"ca", e.ca},
                          {"asr", e.asr}});
      }
      dl["epochs"] = epochs;
      dl["inversion"] = {{"calls", defended.log.stats.inversion_calls},
                         {"inner_steps", defended.log.stats.inner_steps},
                         {"budget_violations", defended.log.stats.budget_violations},
                         {"range_violations", defended.log.stats.range_violations},
                         {"backdoor_class_violations", defended.log.stats.backdoor_class_violations},
                         {"skipped_anchors", defended.log.stats.skipped_anchors},
                         {"descent_violations", defended.log.stats.descent_violations}};
      write_text(rundir / artifact::defense_log, dl.dump(2) + "\n");
    } else {
      defended.bank = load_bank(resolve_resume(cfg, rundir, "defend", artifact::bank).string());
      const fs::path dm = rundir / artifact::defended_model;
      if (cfg.defense_name == "ft" || cfg.defense_name == "cleanclip") {
        auto it = cfg.resume.find("defend");
        const fs::path path = it != cfg.resume.end() && !it->second.empty()
                                  ? fs::path(it->second).parent_path() / artifact::defended_model
                                  : dm;
        if (!fs::exists(path))
          throw ConfigError("stage 'defend' is skipped but its checkpoint does not exist: " +
                            path.string());
        defended.params = load_params(path.string());
      }
    }

    // ---- eval
    current_stage = "eval";
    if (cfg.stage_run.at("eval")) {
      StageTimer timer{wall_times, "eval"};
      ran_any = true;
      EvalReport report;
      report.kind = "matrix";
      report.seed = cfg.seed;
      report.config_digest = config_digest(cfg);
      const std::string attack_label = cfg.attack_enabled ? to_string(cfg.poison.trigger.kind) : "none";
      const PromptBank zero_bank =
          PromptBank::zeros(model.config.vocab, cfg.defense.context_length, model.config.token_dim,
                            cfg.defense.class_position, false);
      auto add_cell = [&](const std::string& defense_label, const DualEncoderParams& m,
                          const PromptBank& b) {
        const auto t0 = std::chrono::steady_clock::now();
        EvalCell cell;
        cell.attack = attack_label;
        cell.defense = defense_label;
        try {
          cell.ca = clean_accuracy(m, b, data.test);
          cell.n_clean = data.test.size();
          if (cfg.attack_enabled) {
            cell.asr = attack_success_rate(m, b, data.test, cfg.poison.trigger,
                                           cfg.poison.target_class);
            cell.n_triggered =
                triggered_testset(data.test, cfg.poison.trigger, cfg.poison.target_class).size();
          }
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
        report.cells.push_back(cell);
        cell_runtimes[attack_label + "/" + defense_label] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      };
      add_cell("none", model, zero_bank);
      if (cfg.defense_name != "none") add_cell(cfg.defense_name, defended.params, defended.bank);
      write_text(rundir / cfg.report_name, serialize_report(report));
      if (cfg.plots) emit_plots((rundir / cfg.report_name).string(), rundir.string());
    }

    // ---- manifest (only when something actually ran; lists every artifact)
    if (ran_any) {
      current_stage = "manifest";
      json mf;
      mf["schema"] = "cbpt-manifest-v1";
      mf["config"] = json::parse(config_echo(cfg));
      mf["config_digest"] = config_digest(cfg);
      json artifacts = json::array();
      std::vector<fs::path> files;
      for (const auto& entry : fs::recursive_directory_iterator(rundir))
        if (entry.is_regular_file() && entry.path().filename() != artifact::manifest)
          files.push_back(entry.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files)
        artifacts.push_back({{"path", fs::relative(f, rundir).string()},
                             {"sha256", file_digest(f)},
                             {"bytes", fs::file_size(f)}});
      mf["artifacts"] = artifacts;
      mf["wall_times_s"] = wall_times;
      mf["cell_runtimes_s"] = cell_runtimes;
      write_text(rundir / artifact::manifest, mf.dump(2) + "\n");
    }
  } catch (const std::exception& e) {
    if (current_stage != "manifest")
      write_text(rundir / (current_stage + ".failed"), std::string(e.what()) + "\n");
    throw;
  }
  return rundir.string();
}

}  // namespace cbpt
