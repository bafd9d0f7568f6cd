#include "cbpt/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cbpt/sha256.hpp"

namespace cbpt {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw ConfigError("config key '" + key + "': expected " + expected);
}

void reject_unknown(const json& obj, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) type_error(where, "object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown config key '" + (where.empty() ? it.key() : where + "." + it.key()) +
                        "'");
  }
}

double get_num(const json& obj, const std::string& where, const char* key, double dflt) {
  if (!obj.contains(key)) return dflt;
  const auto& v = obj.at(key);
  if (!v.is_number()) type_error(where + "." + key, "number");
  return v.get<double>();
}

int get_int(const json& obj, const std::string& where, const char* key, int dflt) {
  if (!obj.contains(key)) return dflt;
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) type_error(where + "." + key, "integer");
  return v.get<int>();
}

std::uint64_t get_u64(const json& obj, const std::string& where, const char* key, std::uint64_t dflt) {
  if (!obj.contains(key)) return dflt;
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) type_error(where + "." + key, "integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const json& obj, const std::string& where, const char* key, bool dflt) {
  if (!obj.contains(key)) return dflt;
  const auto& v = obj.at(key);
  if (!v.is_boolean()) type_error(where + "." + key, "boolean");
  return v.get<bool>();
}

std::string get_str(const json& obj, const std::string& where, const char* key,
                    const std::string& dflt) {
  if (!obj.contains(key)) return dflt;
  const auto& v = obj.at(key);
  if (!v.is_string()) type_error(where + "." + key, "string");
  return v.get<std::string>();
}

std::vector<int> get_int_list(const json& obj, const std::string& where, const char* key,
                              std::vector<int> dflt) {
  if (!obj.contains(key)) return dflt;
  const auto& v = obj.at(key);
  if (!v.is_array()) type_error(where + "." + key, "integer array");
  std::vector<int> out;
  for (const auto& e : v) {
    if (!e.is_number_integer()) type_error(where + "." + key, "integer array");
    out.push_back(e.get<int>());
  }
  return out;
}

TriggerSpec parse_trigger(const json& t, const std::string& where) {
  reject_unknown(t, where,
                 {"kind", "patch_pixels", "patch_h", "patch_w", "loc_y", "loc_x", "blend_ratio",
                  "sig_amplitude", "sig_frequency", "warp_strength", "rng_seed"});
  TriggerSpec spec;
  spec.kind = trigger_kind_from_string(get_str(t, where, "kind", "patch"));
  spec.patch_h = get_int(t, where, "patch_h", 3);
  spec.patch_w = get_int(t, where, "patch_w", 3);
  if (t.contains("patch_pixels")) {
    const auto& v = t.at("patch_pixels");
    if (!v.is_array()) type_error(where + ".patch_pixels", "flat number array [c*h*w]");
    std::vector<double> vals;
    for (const auto& e : v) {
      if (!e.is_number()) type_error(where + ".patch_pixels", "flat number array [c*h*w]");
      vals.push_back(e.get<double>());
    }
    const int per_ch = spec.patch_h * spec.patch_w;
    if (per_ch <= 0 || vals.size() % per_ch != 0)
      throw ConfigError("config key '" + where + ".patch_pixels': length must be channels*patch_h*patch_w");
    const int ch = static_cast<int>(vals.size()) / per_ch;
    spec.patch_pixels.resize(ch, per_ch);
    for (int c = 0; c < ch; ++c)
      for (int i = 0; i < per_ch; ++i) spec.patch_pixels(c, i) = vals[c * per_ch + i];
  }
  spec.loc_y = get_int(t, where, "loc_y", -1);
  spec.loc_x = get_int(t, where, "loc_x", -1);
  spec.blend_ratio = get_num(t, where, "blend_ratio", 0.2);
  spec.sig_amplitude = get_num(t, where, "sig_amplitude", 40.0);
  spec.sig_frequency = get_num(t, where, "sig_frequency", 6.0);
  spec.warp_strength = get_num(t, where, "warp_strength", 1.5);
  spec.rng_seed = get_u64(t, where, "rng_seed", 7);
  return spec;
}

json trigger_echo(const TriggerSpec& s) {
  json t;
  t["kind"] = to_string(s.kind);
  if (s.patch_pixels.size() != 0) {
    std::vector<double> vals;
    for (int c = 0; c < s.patch_pixels.rows(); ++c)
      for (int i = 0; i < s.patch_pixels.cols(); ++i) vals.push_back(s.patch_pixels(c, i));
    t["patch_pixels"] = vals;
  }
  t["patch_h"] = s.patch_h;
  t["patch_w"] = s.patch_w;
  t["loc_y"] = s.loc_y;
  t["loc_x"] = s.loc_x;
  t["blend_ratio"] = s.blend_ratio;
  t["sig_amplitude"] = s.sig_amplitude;
  t["sig_frequency"] = s.sig_frequency;
  t["warp_strength"] = s.warp_strength;
  t["rng_seed"] = s.rng_seed;
  return t;
}

ExperimentConfig parse_json(const json& root) {
  reject_unknown(root, "",
                 {"seed", "workers", "run_dir", "dataset", "attack", "model", "defense", "eval",
                  "stages"});
  ExperimentConfig cfg;
  cfg.seed = get_u64(root, "", "seed", 42);
  cfg.workers = get_int(root, "", "workers", 1);
  cfg.run_dir = get_str(root, "", "run_dir", "runs");

  const json ds = root.value("dataset", json::object());
  reject_unknown(ds, "dataset",
                 {"classes", "train_per_class", "test_per_class", "image_size", "channels", "seed"});
  cfg.dataset.classes = get_int(ds, "dataset", "classes", 10);
  cfg.dataset.train_per_class = get_int(ds, "dataset", "train_per_class", 200);
  cfg.dataset.test_per_class = get_int(ds, "dataset", "test_per_class", 100);
  cfg.dataset.image_size = get_int(ds, "dataset", "image_size", 32);
  cfg.dataset.channels = get_int(ds, "dataset", "channels", 3);
  cfg.dataset.seed = get_u64(ds, "dataset", "seed", derive_seed(cfg.seed, "dataset"));

  const json atk = root.value("attack", json::object());
  reject_unknown(atk, "attack", {"enabled", "target_class", "poison_rate", "rng_seed", "trigger"});
  cfg.attack_enabled = get_bool(atk, "attack", "enabled", !atk.empty());
  cfg.poison.target_class = get_int(atk, "attack", "target_class", 0);
  cfg.poison.poison_rate = get_num(atk, "attack", "poison_rate", 0.05);
  cfg.poison.rng_seed = get_u64(atk, "attack", "rng_seed", derive_seed(cfg.seed, "poison"));
  cfg.poison.trigger = parse_trigger(atk.value("trigger", json::object()), "attack.trigger");

  const json mdl = root.value("model", json::object());
  reject_unknown(mdl, "model",
                 {"embed_dim", "vocab", "temperature", "image_tower_widths", "text_tower_widths",
                  "seed", "epochs", "lr", "batch_size"});
  cfg.model.image_size = cfg.dataset.image_size;
  cfg.model.channels = cfg.dataset.channels;
  cfg.model.embed_dim = get_int(mdl, "model", "embed_dim", 64);
  cfg.model.token_dim = cfg.model.embed_dim;
  cfg.model.vocab = get_int(mdl, "model", "vocab", cfg.dataset.classes);
  cfg.model.temperature = get_num(mdl, "model", "temperature", 0.07);
  cfg.model.image_tower_widths = get_int_list(mdl, "model", "image_tower_widths", {16, 32});
  cfg.model.text_tower_widths = get_int_list(mdl, "model", "text_tower_widths", {64});
  cfg.model.seed = get_u64(mdl, "model", "seed", derive_seed(cfg.seed, "model"));
  cfg.pretrain_epochs = get_int(mdl, "model", "epochs", 15);
  cfg.pretrain_lr = get_num(mdl, "model", "lr", 3e-4);
  cfg.pretrain_batch = get_int(mdl, "model", "batch_size", 32);

  const json def = root.value("defense", json::object());
  reject_unknown(def, "defense",
                 {"name", "lambda1", "lambda2", "lambda3", "alpha", "epochs", "warmup_epochs",
                  "batch_size", "lr", "budget", "positive_strategy", "context_length",
                  "class_position", "class_wise", "shots", "rng_seed", "ft_lr", "aug_strength",
                  "ss_weight"});
  cfg.defense_name = get_str(def, "defense", "name", "cbpt");
  if (cfg.defense_name != "none" && cfg.defense_name != "ft" && cfg.defense_name != "cleanclip" &&
      cfg.defense_name != "cbpt")
    throw ConfigError("config key 'defense.name': expected none|ft|cleanclip|cbpt");
  cfg.defense.lambda1 = get_num(def, "defense", "lambda1", 0.4);
  cfg.defense.lambda2 = get_num(def, "defense", "lambda2", 1.0);
  cfg.defense.lambda3 = get_num(def, "defense", "lambda3", 1.0);
  cfg.defense.alpha = get_num(def, "defense", "alpha", 0.1);
  cfg.defense.epochs = get_int(def, "defense", "epochs", 20);
  cfg.defense.warmup_epochs = get_int(def, "defense", "warmup_epochs", 5);
  cfg.defense.batch_size = get_int(def, "defense", "batch_size", 32);
  cfg.defense.lr = get_num(def, "defense", "lr", 2e-3);
  const json bud = def.value("budget", json::object());
  reject_unknown(bud, "defense.budget", {"rho", "steps", "lr"});
  const int pixels = cfg.dataset.channels * cfg.dataset.image_size * cfg.dataset.image_size;
  cfg.defense.budget.rho = get_num(bud, "defense.budget", "rho", default_rho(pixels));
  cfg.defense.budget.steps = get_int(bud, "defense.budget", "steps", 10);
  cfg.defense.budget.lr = get_num(bud, "defense.budget", "lr", 0.1);
  cfg.defense.positive_strategy =
      positive_strategy_from_string(get_str(def, "defense", "positive_strategy", "farthest"));
  cfg.defense.context_length = get_int(def, "defense", "context_length", 4);
  cfg.defense.class_position =
      class_position_from_string(get_str(def, "defense", "class_position", "end"));
  cfg.defense.class_wise = get_bool(def, "defense", "class_wise", true);
  cfg.defense.shots = get_int(def, "defense", "shots", 16);
  cfg.defense.rng_seed = get_u64(def, "defense", "rng_seed", derive_seed(cfg.seed, "defense"));
  cfg.ft_lr = get_num(def, "defense", "ft_lr", 1e-4);
  cfg.aug_strength = get_num(def, "defense", "aug_strength", 1.0);
  cfg.ss_weight = get_num(def, "defense", "ss_weight", 1.0);

  const json ev = root.value("eval", json::object());
  reject_unknown(ev, "eval", {"report", "plots"});
  cfg.report_name = get_str(ev, "eval", "report", "report.json");
  cfg.plots = get_bool(ev, "eval", "plots", true);

  const json st = root.value("stages", json::object());
  reject_unknown(st, "stages", {"poison", "pretrain", "defend", "eval", "resume"});
  for (const char* stage : {"poison", "pretrain", "defend", "eval"}) {
    const std::string mode = get_str(st, "stages", stage, "run");
    if (mode != "run" && mode != "skip")
      throw ConfigError("config key 'stages." + std::string(stage) + "': expected run|skip");
    cfg.stage_run[stage] = mode == "run";
  }
  const json res = st.value("resume", json::object());
  reject_unknown(res, "stages.resume", {"poison", "pretrain", "defend"});
  for (const char* stage : {"poison", "pretrain", "defend"})
    if (res.contains(stage)) cfg.resume[stage] = get_str(res, "stages.resume", stage, "");

  cfg.validate();
  return cfg;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset.classes < 2) throw ConfigError("dataset.classes must be >= 2");
  if (dataset.train_per_class < 1 || dataset.test_per_class < 1)
    throw ConfigError("dataset split sizes must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (pretrain_epochs < 0) throw ConfigError("model.epochs must be >= 0");
  model.validate();
  if (model.vocab < dataset.classes)
    throw ConfigError("model.vocab must be >= dataset.classes");
  if (attack_enabled) poison.validate(dataset.classes);
  defense.validate();
  defense.budget.validate();
}

ExperimentConfig parse_config_text(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_json(root);
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_echo(const ExperimentConfig& cfg) {
  json root;
  root["seed"] = cfg.seed;
  root["workers"] = cfg.workers;
  root["run_dir"] = cfg.run_dir;
  json ds;
  ds["classes"] = cfg.dataset.classes;
  ds["train_per_class"] = cfg.dataset.train_per_class;
  ds["test_per_class"] = cfg.dataset.test_per_class;
  ds["image_size"] = cfg.dataset.image_size;
  ds["channels"] = cfg.dataset.channels;
  ds["seed"] = cfg.dataset.seed;
  root["dataset"] = ds;
  json atk;
  atk["enabled"] = cfg.attack_enabled;
  atk["target_class"] = cfg.poison.target_class;
  atk["poison_rate"] = cfg.poison.poison_rate;
  atk["rng_seed"] = cfg.poison.rng_seed;
  atk["trigger"] = trigger_echo(cfg.poison.trigger);
  root["attack"] = atk;
  json mdl;
  mdl["embed_dim"] = cfg.model.embed_dim;
  mdl["vocab"] = cfg.model.vocab;
  mdl["temperature"] = cfg.model.temperature;
  mdl["image_tower_widths"] = cfg.model.image_tower_widths;
  mdl["text_tower_widths"] = cfg.model.text_tower_widths;
  mdl["seed"] = cfg.model.seed;
  mdl["epochs"] = cfg.pretrain_epochs;
  mdl["lr"] = cfg.pretrain_lr;
  mdl["batch_size"] = cfg.pretrain_batch;
  root["model"] = mdl;
  json def;
  def["name"] = cfg.defense_name;
  def["lambda1"] = cfg.defense.lambda1;
  def["lambda2"] = cfg.defense.lambda2;
  def["lambda3"] = cfg.defense.lambda3;
  def["alpha"] = cfg.defense.alpha;
  def["epochs"] = cfg.defense.epochs;
  def["warmup_epochs"] = cfg.defense.warmup_epochs;
  def["batch_size"] = cfg.defense.batch_size;
  def["lr"] = cfg.defense.lr;
  def["budget"] = {{"rho", cfg.defense.budget.rho},
                   {"steps", cfg.defense.budget.steps},
                   {"lr", cfg.defense.budget.lr}};
  def["positive_strategy"] = to_string(cfg.defense.positive_strategy);
  def["context_length"] = cfg.defense.context_length;
  def["class_position"] = to_string(cfg.defense.class_position);
  def["class_wise"] = cfg.defense.class_wise;
  def["shots"] = cfg.defense.shots;
  def["rng_seed"] = cfg.defense.rng_seed;
  def["ft_lr"] = cfg.ft_lr;
  def["aug_strength"] = cfg.aug_strength;
  def["ss_weight"] = cfg.ss_weight;
  root["defense"] = def;
  root["eval"] = {{"report", cfg.report_name}, {"plots", cfg.plots}};
  json st;
  for (const char* stage : {"poison", "pretrain", "defend", "eval"})
    st[stage] = cfg.stage_run.at(stage) ? "run" : "skip";
  json res = json::object();
  for (const char* stage : {"poison", "pretrain", "defend"}) {
    auto it = cfg.resume.find(stage);
    if (it != cfg.resume.end()) res[stage] = it->second;
  }
  st["resume"] = res;
  root["stages"] = st;
  return root.dump(2) + "\n";
}

std::string config_digest(const ExperimentConfig& cfg) {
  // stage control and output locations do not change the experiment itself
  ExperimentConfig c = cfg;
  c.stage_run = {{"poison", true}, {"pretrain", true}, {"defend", true}, {"eval", true}};
  c.resume.clear();
  c.run_dir = "";
  c.workers = 1;
  return sha256_hex(config_echo(c));
}

std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::pair<std::string, std::string>>& overrides) {
  json root;
  try {
    root = json::parse(json_text.empty() ? "{}" : json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const auto& [path, value] : overrides) {
    json* node = &root;
    std::size_t start = 0;
    while (true) {
      const std::size_t dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
      if (key.empty()) throw ConfigError("bad override path '" + path + "'");
      if (dot == std::string::npos) {
        json parsed = json::parse(value, nullptr, false);
        (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
        break;
      }
      node = &(*node)[key];
      if (!node->is_object() && !node->is_null()) *node = json::object();
      start = dot + 1;
    }
  }
  return root.dump();
}

std::vector<std::pair<std::string, std::string>> env_overrides(char** envp) {
  std::vector<std::pair<std::string, std::string>> out;
  if (!envp) return out;
  const std::string prefix = "CBPT_";
  for (char** e = envp; *e; ++e) {
    std::string entry(*e);
    if (entry.rfind(prefix, 0) != 0) continue;
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string path = entry.substr(prefix.size(), eq - prefix.size());
    // __ stands for a dot in environment variable names
    std::string dotted;
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (i + 1 < path.size() && path[i] == '_' && path[i + 1] == '_') {
        dotted += '.';
        ++i;
      } else {
        dotted += path[i];
      }
    }
    out.emplace_back(dotted, entry.substr(eq + 1));
  }
  return out;
}

}  // namespace cbpt
