#include "cbpt/plots.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace cbpt {

using json = nlohmann::ordered_json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write plot file: " + path);
  out << content;
}

}  // namespace

std::vector<std::string> emit_plots(const std::string& report_path, const std::string& out_dir) {
  const EvalReport report = parse_report(report_path);
  std::filesystem::create_directories(out_dir);
  const std::string stem = std::filesystem::path(report_path).stem().string();
  const std::string group = report.kind == "ablation" ? report.axis : "matrix";
  const std::string base = (std::filesystem::path(out_dir) / (stem + "_" + group)).string();

  // sidecar first: the exact numbers the bars encode
  json side;
  side["schema"] = "cbpt-plot-sidecar-v1";
  side["group"] = group;
  json bars = json::array();
  for (const auto& c : report.cells) {
    json b;
    b["label"] = c.attack + "/" + c.defense;
    b["ca"] = c.ca;
    b["asr"] = c.asr;
    bars.push_back(b);
  }
  side["bars"] = bars;
  write_file(base + ".sidecar.json", side.dump(2) + "\n");

  // grouped bars, two per cell (CA then ASR), heights proportional to value
  const int n = static_cast<int>(report.cells.size());
  const int bar_w = 28, gap = 14, group_gap = 30, chart_h = 240, label_h = 70, left = 50;
  const int width = left + 20 + n * (2 * bar_w + gap + group_gap);
  const int height = chart_h + label_h + 40;
  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double frac = tick / 4.0;
    const int y = 20 + static_cast<int>((1.0 - frac) * chart_h);
    svg += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(y) + "\" x2=\"" +
           std::to_string(width - 10) + "\" y2=\"" + std::to_string(y) +
           "\" stroke=\"#dddddd\"/>\n";
    svg += "<text x=\"8\" y=\"" + std::to_string(y + 4) + "\" font-size=\"11\">" + fmt(frac) +
           "</text>\n";
  }
  int x = left + 10;
  for (const auto& c : report.cells) {
    const int ca_h = static_cast<int>(c.ca * chart_h);
    const int asr_h = static_cast<int>(c.asr * chart_h);
    svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(20 + chart_h - ca_h) +
           "\" width=\"" + std::to_string(bar_w) + "\" height=\"" + std::to_string(ca_h) +
           "\" fill=\"#4878cf\"><title>CA " + fmt(c.ca) + "</title></rect>\n";
    svg += "<rect x=\"" + std::to_string(x + bar_w + gap) + "\" y=\"" +
           std::to_string(20 + chart_h - asr_h) + "\" width=\"" + std::to_string(bar_w) +
           "\" height=\"" + std::to_string(asr_h) + "\" fill=\"#d1495b\"><title>ASR " + fmt(c.asr) +
           "</title></rect>\n";
    svg += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(20 + chart_h + 16) +
           "\" font-size=\"10\" transform=\"rotate(30 " + std::to_string(x) + " " +
           std::to_string(20 + chart_h + 16) + ")\">" + c.attack + "/" + c.defense + "</text>\n";
    x += 2 * bar_w + gap + group_gap;
  }
  svg += "<text x=\"" + std::to_string(left + 10) + "\" y=\"14\" font-size=\"12\">CA (blue) and "
         "ASR (red) per cell</text>\n";
  svg += "</svg>\n";
  write_file(base + ".svg", svg);
  return {base + ".svg", base + ".sidecar.json"};
}

}  // namespace cbpt
