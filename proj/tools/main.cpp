#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cbpt/pipeline.hpp"
#include "cbpt/plots.hpp"

extern char** environ;

namespace {

using namespace cbpt;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  int workers = 0;
};

// precedence: config file < environment (CBPT_*) < --set < --seed/--workers
ExperimentConfig load_config(const CommonOpts& opts) {
  std::string text = opts.config_path.empty() ? "{}" : read_file(opts.config_path);
  std::vector<std::pair<std::string, std::string>> overrides = env_overrides(environ);
  for (const auto& s : opts.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  if (opts.seed >= 0) overrides.emplace_back("seed", std::to_string(opts.seed));
  if (opts.workers > 0) overrides.emplace_back("workers", std::to_string(opts.workers));
  return parse_config_text(apply_overrides(text, overrides));
}

void print_report(const EvalReport& report) {
  for (const auto& c : report.cells) {
    if (!c.error.empty()) {
      std::cout << c.attack << "/" << c.defense << "  ERROR: " << c.error << "\n";
      continue;
    }
    std::string name = c.attack;
    try {
      name = trigger_display_name(trigger_kind_from_string(c.attack));
    } catch (const ConfigError&) {
    }
    std::cout << render_cell_percent(name + " [" + c.defense + "]", c.ca, c.asr) << "\n";
  }
}

int run_stages(const CommonOpts& opts, const std::vector<std::string>& stages_to_run) {
  ExperimentConfig cfg = load_config(opts);
  if (!stages_to_run.empty()) {
    for (auto& [stage, run] : cfg.stage_run) run = false;
    for (const auto& s : stages_to_run) {
      if (!cfg.stage_run.count(s))
        throw ConfigError("unknown stage '" + s + "' (expected poison|pretrain|defend|eval)");
      cfg.stage_run[s] = true;
    }
  }
  const std::string rundir = run_pipeline(cfg);
  std::cout << "run directory: " << rundir << "\n";
  const auto report_path = std::filesystem::path(rundir) / cfg.report_name;
  if (cfg.stage_run.at("eval") && std::filesystem::exists(report_path))
    print_report(parse_report(report_path.string()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"backdoor purification lab: poison, pretrain, defend, evaluate"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string stage;
  std::string axis;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opts.config_path, "experiment config (JSON)");
    cmd->add_option("--set", opts.sets, "override a config key: dotted.path=value")->take_all();
    cmd->add_option("--seed", opts.seed, "override the global seed");
    cmd->add_option("--workers", opts.workers, "stage-internal parallelism budget");
  };

  CLI::App* c_pipeline = app.add_subcommand("pipeline", "run all enabled stages");
  add_common(c_pipeline);
  c_pipeline->add_option("--stage", stage, "run a single stage (poison|pretrain|defend|eval)");
  CLI::App* c_poison = app.add_subcommand("poison", "build + poison the training pairs");
  add_common(c_poison);
  CLI::App* c_pretrain = app.add_subcommand("pretrain", "contrastive-pretrain the suspicious model");
  add_common(c_pretrain);
  CLI::App* c_defend = app.add_subcommand("defend", "run the configured defense");
  add_common(c_defend);
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate CA/ASR and write the report");
  add_common(c_eval);
  CLI::App* c_ablate = app.add_subcommand("ablate", "sweep one ablation axis");
  add_common(c_ablate);
  c_ablate->add_option("--axis", axis, "positive_strategy|context_length|class_position|class_wise|shots")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_pipeline->parsed())
      return run_stages(opts, stage.empty() ? std::vector<std::string>{} : std::vector<std::string>{stage});
    if (c_poison->parsed()) return run_stages(opts, {"poison"});
    if (c_pretrain->parsed()) return run_stages(opts, {"pretrain"});
    if (c_defend->parsed()) return run_stages(opts, {"defend"});
    if (c_eval->parsed()) return run_stages(opts, {"eval"});
    if (c_ablate->parsed()) {
      ExperimentConfig cfg = load_config(opts);
      const EvalReport report = run_ablation(axis, cfg);
      const std::filesystem::path rundir = run_directory(cfg);
      std::filesystem::create_directories(rundir);
      const auto path = rundir / ("ablation_" + axis + ".json");
      {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << serialize_report(report);
      }
      if (cfg.plots) emit_plots(path.string(), rundir.string());
      std::cout << "report: " << path.string() << "\n";
      print_report(report);
      return 0;
    }
  } catch (const TrainingError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
