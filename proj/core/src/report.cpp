#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "miclab/commands.hpp"
#include "miclab/errors.hpp"

namespace miclab::harness {
namespace {

namespace fs = std::filesystem;

struct RunRecord {
  std::string dir;
  ExperimentConfig cfg;
  std::vector<uda::MetricPoint> history;
  std::string main_metric;  // miou or accuracy
};

// Directories starting with '_' hold scratch state (shared warmups).
void collect_runs(const fs::path& p, std::vector<fs::path>& out) {
  if (fs::exists(p / "config.json")) {
    out.push_back(p);
    return;
  }
  std::vector<fs::path> children;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_directory() && e.path().filename().string().rfind('_', 0) != 0) children.push_back(e.path());
  std::sort(children.begin(), children.end());
  for (const auto& c : children) collect_runs(c, out);
}

double final_value(const RunRecord& r, const std::string& metric, int cls = -1) {
  int step = -1;
  double v = std::nan("");
  for (const auto& m : r.history) {
    if (m.split == "target_val" && m.metric == metric && m.cls == cls && m.step >= step) {
      step = m.step;
      v = m.value;
    }
  }
  return v;
}

std::string fmt(double v, int digits = 4) {
  if (std::isnan(v)) return "-";
  char b[32];
  std::snprintf(b, sizeof b, "%.*f", digits, v);
  return b;
}

std::string method_label(const ExperimentConfig& c) {
  const std::string host = uda::to_string(c.train.host);
  return c.train.mic.enabled ? "mic(" + host + ")" : host;
}

double median_of(const std::vector<double>& v) {
  std::vector<double> d;
  for (double x : v)
    if (!std::isnan(x)) d.push_back(x);
  return median(d);
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string curves_svg(const std::vector<std::string>& names,
                       const std::map<std::string, std::vector<const RunRecord*>>& groups) {
  const double W = 640, H = 400, L = 60, R = 180, T = 20, B = 40;
  // Median curve per group over the evaluation steps.
  std::map<std::string, std::vector<std::pair<int, double>>> curves;
  int max_step = 1;
  for (const auto& name : names) {
    const auto& runs = groups.at(name);
    std::map<int, std::vector<double>> at;
    for (const RunRecord* r : runs)
      for (const auto& m : r->history)
        if (m.split == "target_val" && m.metric == r->main_metric && m.cls < 0) at[m.step].push_back(m.value);
    for (const auto& [s, vs] : at) {
      curves[name].emplace_back(s, median_of(vs));
      max_step = std::max(max_step, s);
    }
  }
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const double pw = W - L - R, ph = H - T - B;
  o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = T + ph * (1.0 - i / 5.0);
    o << "<text x=\"" << L - 6 << "\" y=\"" << y + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(i / 5.0, 1)
      << "</text>\n";
  }
  o << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 8 << "\" font-size=\"12\" text-anchor=\"middle\">step (max "
    << max_step << ")</text>\n";
  std::size_t idx = 0;
  for (const auto& name : names) {
    const char* color = kPalette[idx % (sizeof kPalette / sizeof *kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [s, v] : curves[name]) {
      o << L + pw * s / max_step << "," << T + ph * (1.0 - std::clamp(v, 0.0, 1.0)) << " ";
    }
    o << "\"/>\n";
    const double ly = T + 14 + 16.0 * idx;
    o << "<rect x=\"" << W - R + 10 << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\"" << color
      << "\"/>\n";
    o << "<text x=\"" << W - R + 26 << "\" y=\"" << ly << "\" font-size=\"11\">" << name << "</text>\n";
    ++idx;
  }
  o << "</svg>\n";
  return o.str();
}

std::string heatmap_svg(const std::vector<RunRecord>& runs) {
  std::map<std::pair<int, double>, std::vector<double>> cells;
  std::set<int> patches;
  std::set<double> ratios;
  for (const auto& r : runs) {
    if (!r.cfg.train.mic.enabled) continue;
    const int b = r.cfg.train.mic.patch_size;
    const double q = r.cfg.train.mic.mask_ratio;
    patches.insert(b);
    ratios.insert(q);
    cells[{b, q}].push_back(final_value(r, r.main_metric));
  }
  if (patches.size() < 2 || ratios.size() < 2) return "";
  const double cw = 70, ch = 34, L = 80, T = 40;
  const double W = L + cw * ratios.size() + 20, H = T + ch * patches.size() + 40;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << L << "\" y=\"16\" font-size=\"12\">median final score: patch size (rows) x mask ratio"
    << " (columns)</text>\n";
  std::size_t ci = 0;
  for (double q : ratios) {
    o << "<text x=\"" << L + cw * (ci + 0.5) << "\" y=\"" << T - 6 << "\" font-size=\"11\" text-anchor=\"middle\">"
      << fmt(q, 2) << "</text>\n";
    ++ci;
  }
  std::size_t ri = 0;
  for (int b : patches) {
    o << "<text x=\"" << L - 8 << "\" y=\"" << T + ch * (ri + 0.5) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
      << b << "</text>\n";
    ci = 0;
    for (double q : ratios) {
      const auto it = cells.find({b, q});
      const double v = it == cells.end() ? std::nan("") : median_of(it->second);
      const int shade = std::isnan(v) ? 230 : static_cast<int>(255 - 200 * std::clamp(v, 0.0, 1.0));
      o << "<rect x=\"" << L + cw * ci << "\" y=\"" << T + ch * ri << "\" width=\"" << cw << "\" height=\"" << ch
        << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" stroke=\"white\"/>\n";
      o << "<text x=\"" << L + cw * (ci + 0.5) << "\" y=\"" << T + ch * (ri + 0.5) + 4
        << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt(v, 3) << "</text>\n";
      ++ci;
    }
    ++ri;
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace

Report cmd_report(const std::vector<std::string>& dirs, const std::string& out_dir) {
  if (dirs.empty()) throw ConfigError("report needs at least one run directory");
  std::vector<RunRecord> runs;
  for (const auto& d : dirs) {
    if (!fs::is_directory(d)) throw IOError("'" + d + "' is not a directory");
    std::vector<fs::path> found;
    collect_runs(d, found);
    if (found.empty()) throw IOError("no runs found under '" + d + "'");
    for (const auto& p : found) {
      const fs::path metrics = p / "metrics.csv";
      if (!fs::exists(metrics)) throw IOError("run '" + p.string() + "' has no metrics.csv");
      RunRecord r;
      r.dir = p.string();
      r.cfg = load_config((p / "config.json").string());
      r.history = parse_metrics_csv(read_file(metrics.string()));
      r.main_metric = r.cfg.train.arch.kind == nn::ModelKind::kSegmenter ? "miou" : "accuracy";
      runs.push_back(std::move(r));
    }
  }

  std::vector<std::string> names;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : runs) {
    if (!groups.count(r.cfg.name)) names.push_back(r.cfg.name);
    groups[r.cfg.name].push_back(&r);
  }

  // Per-class columns come from the first run's class count.
  const bool seg = runs.front().main_metric == "miou";
  const int classes = runs.front().cfg.train.arch.num_classes;
  const std::string cls_metric = seg ? "iou" : "class_accuracy";

  Report rep;
  rep.csv = "name,method,seed,dir,metric,probe_miou";
  for (int k = 0; k < classes; ++k) rep.csv += "," + cls_metric + "_" + std::to_string(k);
  rep.csv += "\n";
  for (const auto& r : runs) {
    rep.csv += r.cfg.name + "," + method_label(r.cfg) + "," + std::to_string(r.cfg.train.seed) + "," + r.dir + "," +
               format_value(final_value(r, r.main_metric)) + "," + format_value(final_value(r, "probe_miou"));
    for (int k = 0; k < classes; ++k) rep.csv += "," + format_value(final_value(r, cls_metric, k));
    rep.csv += "\n";
  }

  std::ostringstream md;
  md << "# Run comparison\n\n";
  md << "Median over seeds of the final target validation score (" << runs.front().main_metric << ").\n\n";
  md << "| name | method | seeds | " << runs.front().main_metric << " | probe mIoU |";
  for (int k = 0; k < classes; ++k) md << " " << cls_metric << " " << k << " |";
  md << "\n|---|---|---|---|---|";
  for (int k = 0; k < classes; ++k) md << "---|";
  md << "\n";
  for (const auto& name : names) {
    const auto& g = groups[name];
    std::vector<double> main, probe;
    std::vector<std::vector<double>> per(classes);
    for (const RunRecord* r : g) {
      main.push_back(final_value(*r, r->main_metric));
      probe.push_back(final_value(*r, "probe_miou"));
      for (int k = 0; k < classes; ++k) per[k].push_back(final_value(*r, cls_metric, k));
    }
    md << "| " << name << " | " << method_label(g.front()->cfg) << " | " << g.size() << " | "
       << fmt(median_of(main)) << " | " << fmt(median_of(probe)) << " |";
    for (int k = 0; k < classes; ++k) md << " " << fmt(median_of(per[k])) << " |";
    md << "\n";
  }
  md << "\nLearning curves: curves.svg.\n";

  rep.curves_svg = curves_svg(names, groups);
  rep.heatmap_svg = heatmap_svg(runs);
  if (!rep.heatmap_svg.empty()) md << "Patch size x mask ratio grid: heatmap.svg.\n";
  rep.markdown = md.str();

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(out_dir + "/report.md", rep.markdown);
    write_file(out_dir + "/report.csv", rep.csv);
    write_file(out_dir + "/curves.svg", rep.curves_svg);
    if (!rep.heatmap_svg.empty()) write_file(out_dir + "/heatmap.svg", rep.heatmap_svg);
  }
  return rep;
}

}  // namespace miclab::harness
