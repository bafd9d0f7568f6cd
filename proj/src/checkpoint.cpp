#include "cbpt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace cbpt {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'C', 'B', 'P', 'T', 'C', 'K', 'P', '1'};

struct NamedArray {
  std::string name;
  const Mat* mat;
};

void write_container(const std::string& path, const json& header,
                     const std::vector<NamedArray>& arrays) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  json full = header;
  json index = json::array();
  for (const auto& a : arrays)
    index.push_back({{"name", a.name}, {"rows", a.mat->rows()}, {"cols", a.mat->cols()}});
  full["arrays"] = index;
  const std::string h = full.dump();
  const std::uint32_t hlen = static_cast<std::uint32_t>(h.size());
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(h.data(), hlen);
  for (const auto& a : arrays)
    out.write(reinterpret_cast<const char*>(a.mat->data()),
              static_cast<std::streamsize>(sizeof(double) * a.mat->size()));
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

json read_container(const std::string& path, std::vector<std::pair<std::string, Mat>>& arrays) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint not found: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw ConfigError("not a checkpoint file: " + path);
  std::uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  std::string h(hlen, '\0');
  in.read(h.data(), hlen);
  json header;
  try {
    header = json::parse(h);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("corrupt checkpoint header in " + path + ": " + e.what());
  }
  for (const auto& entry : header.at("arrays")) {
    Mat m(entry.at("rows").get<Eigen::Index>(), entry.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw ConfigError("truncated checkpoint: " + path);
    arrays.emplace_back(entry.at("name").get<std::string>(), std::move(m));
  }
  return header;
}

}  // namespace

void save_params(const std::string& path, const DualEncoderParams& params) {
  const auto& c = params.config;
  json header;
  header["kind"] = "dual_encoder";
  header["config"] = {{"image_size", c.image_size},
                      {"channels", c.channels},
                      {"embed_dim", c.embed_dim},
                      {"vocab", c.vocab},
                      {"token_dim", c.token_dim},
                      {"temperature", c.temperature},
                      {"image_tower_widths", c.image_tower_widths},
                      {"text_tower_widths", c.text_tower_widths},
                      {"seed", c.seed}};
  std::vector<NamedArray> arrays;
  params.visit([&](const std::string& name, const Mat& m) { arrays.push_back({name, &m}); });
  write_container(path, header, arrays);
}

DualEncoderParams load_params(const std::string& path) {
  std::vector<std::pair<std::string, Mat>> arrays;
  const json header = read_container(path, arrays);
  if (header.at("kind").get<std::string>() != "dual_encoder")
    throw ConfigError("checkpoint kind mismatch in " + path);
  const json& c = header.at("config");
  EncoderConfig cfg;
  cfg.image_size = c.at("image_size").get<int>();
  cfg.channels = c.at("channels").get<int>();
  cfg.embed_dim = c.at("embed_dim").get<int>();
  cfg.vocab = c.at("vocab").get<int>();
  cfg.token_dim = c.at("token_dim").get<int>();
  cfg.temperature = c.at("temperature").get<double>();
  cfg.image_tower_widths = c.at("image_tower_widths").get<std::vector<int>>();
  cfg.text_tower_widths = c.at("text_tower_widths").get<std::vector<int>>();
  cfg.seed = c.at("seed").get<std::uint64_t>();
  DualEncoderParams params = init_params(cfg);
  std::size_t cursor = 0;
  params.visit([&](const std::string& name, Mat& m) {
    if (cursor >= arrays.size() || arrays[cursor].first != name)
      throw ConfigError("checkpoint array order mismatch at '" + name + "' in " + path);
    if (arrays[cursor].second.rows() != m.rows() || arrays[cursor].second.cols() != m.cols())
      throw ConfigError("checkpoint array shape mismatch at '" + name + "' in " + path);
    m = arrays[cursor].second;
    ++cursor;
  });
  if (cursor != arrays.size()) throw ConfigError("checkpoint has extra arrays: " + path);
  return params;
}

void save_bank(const std::string& path, const PromptBank& bank) {
  bank.validate();
  json header;
  header["kind"] = "prompt_bank";
  header["config"] = {{"n_classes", bank.n_classes},
                      {"context_len", bank.context_len},
                      {"prefix", bank.prefix},
                      {"class_position", to_string(bank.position)},
                      {"class_wise", bank.class_wise},
                      {"dim", bank.dim()}};
  // context stacked over classes (or a single shared block)
  Mat stacked(static_cast<Eigen::Index>(bank.context.size()) * bank.context_len, bank.dim());
  for (std::size_t k = 0; k < bank.context.size(); ++k)
    stacked.middleRows(static_cast<Eigen::Index>(k) * bank.context_len, bank.context_len) =
        bank.context[k];
  std::vector<NamedArray> arrays{{"context", &stacked}};
  write_container(path, header, arrays);
}

PromptBank load_bank(const std::string& path) {
  std::vector<std::pair<std::string, Mat>> arrays;
  const json header = read_container(path, arrays);
  if (header.at("kind").get<std::string>() != "prompt_bank")
    throw ConfigError("checkpoint kind mismatch in " + path);
  const json& c = header.at("config");
  PromptBank bank;
  bank.n_classes = c.at("n_classes").get<int>();
  bank.context_len = c.at("context_len").get<int>();
  bank.prefix = c.at("prefix").get<int>();
  bank.position = class_position_from_string(c.at("class_position").get<std::string>());
  bank.class_wise = c.at("class_wise").get<bool>();
  const int dim = c.at("dim").get<int>();
  if (arrays.size() != 1 || arrays[0].first != "context")
    throw ConfigError("prompt bank checkpoint must contain a single 'context' array: " + path);
  const Mat& stacked = arrays[0].second;
  const int blocks = bank.class_wise ? bank.n_classes : 1;
  if (stacked.rows() != static_cast<Eigen::Index>(blocks) * bank.context_len || stacked.cols() != dim)
    throw ConfigError("prompt bank context shape mismatch: " + path);
  bank.context.resize(blocks);
  for (int k = 0; k < blocks; ++k)
    bank.context[k] = stacked.middleRows(static_cast<Eigen::Index>(k) * bank.context_len,
                                         bank.context_len);
  bank.validate();
  return bank;
}

}  // namespace cbpt
