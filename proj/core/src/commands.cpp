#include "miclab/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"
#include "miclab/errors.hpp"
#include "miclab/evaluation.hpp"

namespace miclab::harness {
namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

void prepare_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw IOError("output directory '" + dir + "' is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

std::string pad_step(int step) {
  char b[16];
  std::snprintf(b, sizeof b, "%07d", step);
  return b;
}

uda::TrainData as_train_data(const DatasetSplits& d) {
  return {&d.source_train, &d.target_train, &d.target_val, d.source_val.samples.empty() ? nullptr : &d.source_val};
}

void append_probe(const ExperimentConfig& cfg, const DatasetSplits& data, uda::TrainState& s) {
  if (!cfg.probe || cfg.train.arch.kind != nn::ModelKind::kSegmenter) return;
  const int patch = cfg.probe_patch > 0 ? cfg.probe_patch : cfg.data.spec.resolution / 2;
  std::vector<const ag::Tensor*> images;
  std::vector<const std::vector<int>*> labels;
  for (const auto& smp : data.target_val.samples) {
    images.push_back(&smp.image);
    labels.push_back(&smp.label);
  }
  const auto cm = eval::context_probe_confusion(s.student, images, labels, patch);
  s.history.push_back({s.step, "target_val", "probe_miou", -1, cm.miou()});
  const auto iou = cm.iou();
  for (std::size_t k = 0; k < iou.size(); ++k)
    if (!std::isnan(iou[k])) s.history.push_back({s.step, "target_val", "probe_iou", static_cast<int>(k), iou[k]});
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '_';
  return out;
}

std::string short_field(const std::string& f) {
  const auto p = f.rfind('.');
  return p == std::string::npos ? f : f.substr(p + 1);
}

std::string literal_label(const std::string& json_literal) {
  const Json j = Json::parse(json_literal);
  if (j.is_string()) return j.get<std::string>();
  return j.dump();
}

// The part of a config that determines training up to warmup_steps.
std::string warmup_projection(const ExperimentConfig& c) {
  ExperimentConfig p;
  p.data = c.data;
  uda::TrainConfig& t = p.train;
  t.arch = c.train.arch;
  t.seed = c.train.seed;
  t.lr = c.train.lr;
  t.momentum = c.train.momentum;
  t.batch_size = c.train.batch_size;
  t.warmup_steps = c.train.warmup_steps;
  t.eval_interval = c.train.eval_interval;
  t.mic.ema_alpha = c.train.mic.ema_alpha;
  using uda::HostMethod;
  const HostMethod h = c.train.host;
  t.host = (h == HostMethod::kSupervisedTarget || h == HostMethod::kAdversarial) ? h : HostMethod::kSourceOnly;
  if (h == HostMethod::kAdversarial) {
    t.host_cfg.disc_width = c.train.host_cfg.disc_width;
    t.host_cfg.grl_lambda = c.train.host_cfg.grl_lambda;
    t.host_cfg.disc_lr = c.train.host_cfg.disc_lr;
  }
  return serialize_config(p);
}

}  // namespace

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

void generate_to(const DatasetConfig& cfg, const std::string& out_dir, bool force) {
  const DatasetSplits d = generate_splits(cfg);
  prepare_dir(out_dir, force);
  write_splits(d, cfg, out_dir);
}

void cmd_generate(const std::string& spec_file, const std::string& out_dir, bool force) {
  generate_to(parse_dataset_config(read_file(spec_file)), out_dir, force);
}

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const std::string dir = cfg.output_dir;
  const std::string cfg_text = serialize_config(cfg);
  uda::TrainState state;
  if (!opts.resume.empty()) {
    std::string stored;
    state = load_checkpoint(opts.resume, &stored, &cfg.train.arch);
    if (stored != cfg_text) throw ConfigError("checkpoint '" + opts.resume + "' was written by a different config");
    fs::create_directories(dir);
  } else if (!opts.warm_start.empty()) {
    std::string stored;
    state = load_checkpoint(opts.warm_start, &stored, &cfg.train.arch);
    const ExperimentConfig from = parse_config(stored);
    if (state.step > cfg.train.warmup_steps || state.step >= from.train.steps) {
      throw ConfigError("warm start checkpoint at step " + std::to_string(state.step) +
                        " is past the warmup phase");
    }
    if (warmup_projection(from) != warmup_projection(cfg)) {
      throw ConfigError("warm start checkpoint '" + opts.warm_start + "' has an incompatible warmup config");
    }
    prepare_dir(dir, opts.force);
  } else {
    prepare_dir(dir, opts.force);
    state = uda::init_state(cfg.train);
  }
  fs::create_directories(dir + "/checkpoints");
  write_file(dir + "/config.json", cfg_text);

  const DatasetSplits data = cfg.data.path.empty() ? generate_splits(cfg.data) : read_splits(cfg.data.path);
  const Json ds = {{"hash", dataset_hash(data)}, {"source", cfg.data.path.empty() ? "generated" : cfg.data.path}};
  write_file(dir + "/dataset.json", ds.dump(2) + "\n");

  const auto t0 = std::chrono::steady_clock::now();
  std::string timing = "step,wall_seconds\n";
  auto hook = [&](const uda::TrainState& s) {
    const bool eval_step = s.step % cfg.train.eval_interval == 0 || s.step == cfg.train.steps;
    if (eval_step) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timing += std::to_string(s.step) + "," + format_value(secs) + "\n";
      if (!opts.quiet) {
        for (const auto& m : s.history)
          if (m.step == s.step && m.split == "target_val" && m.cls < 0) {
            std::cerr << "[" << cfg.name << "] step " << s.step << " " << m.metric << " " << format_value(m.value)
                      << "\n";
          }
      }
    }
    if (cfg.checkpoint_interval > 0 && s.step % cfg.checkpoint_interval == 0 && s.step < cfg.train.steps) {
      save_checkpoint(dir + "/checkpoints/step_" + pad_step(s.step) + ".ckpt", s, cfg_text);
    }
  };
  const int until = opts.stop_at >= 0 ? std::min(opts.stop_at, cfg.train.steps) : cfg.train.steps;
  uda::run_steps(state, cfg.train, as_train_data(data), until, hook);

  RunResult result{dir, {}, state.step >= cfg.train.steps};
  if (result.finished) {
    const bool probed = std::any_of(state.history.begin(), state.history.end(),
                                    [](const uda::MetricPoint& m) { return m.metric == "probe_miou"; });
    if (!probed && cfg.train.steps > 0) append_probe(cfg, data, state);
    save_checkpoint(dir + "/final.ckpt", state, cfg_text);
  } else {
    save_checkpoint(dir + "/checkpoints/step_" + pad_step(state.step) + ".ckpt", state, cfg_text);
  }
  write_file(dir + "/metrics.csv", metrics_csv(state.history));
  const std::string timing_path = dir + "/timing.csv";
  if (!opts.resume.empty() && fs::exists(timing_path)) {
    write_file(timing_path, read_file(timing_path) + timing.substr(timing.find('\n') + 1));
  } else {
    write_file(timing_path, timing);
  }
  result.history = std::move(state.history);
  return result;
}

RunResult cmd_train(const std::string& config_file, const RunOptions& opts) {
  return run_experiment(load_config(config_file), opts);
}

SweepSpec parse_sweep(const std::string& text, const std::string& base_dir) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("sweep file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("sweep file must be an object");
  SweepSpec s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const Json& v = it.value();
    if (k == "base") {
      s.base = parse_config(v.dump());
    } else if (k == "base_file") {
      const fs::path f = v.get<std::string>();
      s.base = load_config((f.is_relative() && !base_dir.empty() ? fs::path(base_dir) / f : f).string());
    } else if (k == "output_dir") {
      s.output_dir = v.get<std::string>();
    } else if (k == "workers") {
      s.workers = v.get<int>();
    } else if (k == "seeds") {
      s.seeds = v.get<std::vector<std::uint64_t>>();
    } else if (k == "axes") {
      for (const auto& a : v) {
        SweepAxis ax;
        ax.field = a.at("field").get<std::string>();
        for (const auto& val : a.at("values")) ax.values.push_back(val.dump());
        s.axes.push_back(std::move(ax));
      }
    } else if (k == "variants") {
      for (const auto& var : v) {
        SweepVariant sv;
        sv.name = var.at("name").get<std::string>();
        if (var.contains("set"))
          for (auto f = var.at("set").begin(); f != var.at("set").end(); ++f) sv.set.emplace_back(f.key(), f.value().dump());
        s.variants.push_back(std::move(sv));
      }
    } else {
      throw ConfigError("sweep field '" + k + "': unknown field");
    }
  }
  if (s.seeds.empty()) throw ConfigError("sweep field 'seeds': must not be empty");
  if (s.workers < 1) throw ConfigError("sweep field 'workers': must be at least 1");
  return s;
}

std::vector<SweepRun> expand_sweep(const SweepSpec& spec) {
  std::vector<SweepVariant> variants = spec.variants;
  if (variants.empty()) variants.push_back({"base", {}});
  std::vector<std::vector<std::string>> cells{{}};
  for (const auto& ax : spec.axes) {
    if (ax.values.empty()) throw ConfigError("sweep axis '" + ax.field + "' has no values");
    std::vector<std::vector<std::string>> next;
    for (const auto& c : cells)
      for (const auto& v : ax.values) {
        auto n = c;
        n.push_back(v);
        next.push_back(std::move(n));
      }
    cells = std::move(next);
  }
  std::vector<SweepRun> runs;
  for (const auto& var : variants) {
    ExperimentConfig vc = spec.base;
    for (const auto& [f, v] : var.set) vc = with_field(vc, f, v);
    for (const auto& cell : cells) {
      ExperimentConfig cc = vc;
      std::string label = var.name;
      for (std::size_t a = 0; a < cell.size(); ++a) {
        cc = with_field(cc, spec.axes[a].field, cell[a]);
        label += "__" + short_field(spec.axes[a].field) + "=" + literal_label(cell[a]);
      }
      label = sanitize(label);
      for (std::uint64_t seed : spec.seeds) {
        SweepRun r;
        r.variant = var.name;
        for (const auto& v : cell) r.axis_values.push_back(literal_label(v));
        r.seed = seed;
        r.dir = (fs::path(spec.output_dir) / label / ("seed_" + std::to_string(seed))).string();
        r.config = cc;
        r.config.train.seed = seed;
        r.config.name = label;
        r.config.output_dir = r.dir;
        r.config.validate();
        runs.push_back(std::move(r));
      }
    }
  }
  return runs;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::pair<std::string, double>> final_metrics(const std::vector<uda::MetricPoint>& history) {
  int last = -1;
  for (const auto& m : history)
    if (m.split == "target_val") last = std::max(last, m.step);
  std::vector<std::pair<std::string, double>> out;
  for (const auto& m : history) {
    if (m.step != last || m.split != "target_val") continue;
    out.emplace_back(m.cls >= 0 ? m.metric + "_" + std::to_string(m.cls) : m.metric, m.value);
  }
  return out;
}

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  std::exception_ptr failure;
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n || failure) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int w = std::min<int>(workers, static_cast<int>(n));
  if (w <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < w; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<std::vector<uda::MetricPoint>> execute_runs(const std::vector<SweepRun>& runs,
                                                        const std::string& scratch_dir, int workers,
                                                        std::vector<std::string>* errors) {
  // Runs whose warmup phases coincide share one warmup checkpoint.
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& t = runs[i].config.train;
    if (t.warmup_steps > 0 && t.warmup_steps < t.steps) groups[warmup_projection(runs[i].config)].push_back(i);
  }
  std::vector<std::vector<std::size_t>> shared;
  for (auto& [key, idx] : groups)
    if (idx.size() > 1) shared.push_back(idx);
  std::vector<std::string> warm_ckpt(runs.size());
  parallel_for(shared.size(), workers, [&](std::size_t g) {
    ExperimentConfig c = runs[shared[g].front()].config;
    c.output_dir = scratch_dir + "/group_" + std::to_string(g);
    RunOptions o;
    o.force = true;
    o.stop_at = c.train.warmup_steps;
    run_experiment(c, o);
    const std::string ckpt = c.output_dir + "/checkpoints/step_" + pad_step(c.train.warmup_steps) + ".ckpt";
    for (std::size_t i : shared[g]) warm_ckpt[i] = ckpt;
  });
  std::vector<std::vector<uda::MetricPoint>> histories(runs.size());
  std::mutex errors_mu;
  if (errors) errors->assign(runs.size(), "");
  parallel_for(runs.size(), workers, [&](std::size_t i) {
    RunOptions o;
    o.force = true;
    o.warm_start = warm_ckpt[i];
    if (!errors) {
      histories[i] = run_experiment(runs[i].config, o).history;
      return;
    }
    try {
      histories[i] = run_experiment(runs[i].config, o).history;
    } catch (const Error& e) {
      std::lock_guard<std::mutex> lock(errors_mu);
      (*errors)[i] = e.what();
    }
  });
  return histories;
}

SweepResult run_sweep(const SweepSpec& spec, bool force) {
  SweepResult res;
  res.runs = expand_sweep(spec);
  if (fs::exists(spec.output_dir) && !fs::is_empty(spec.output_dir) && !force) {
    throw IOError("sweep directory '" + spec.output_dir + "' is not empty (use --force to overwrite)");
  }
  prepare_dir(spec.output_dir, true);
  const auto histories = execute_runs(res.runs, spec.output_dir + "/_warmup", spec.workers);
  std::vector<std::vector<std::pair<std::string, double>>> finals;
  for (const auto& h : histories) finals.push_back(final_metrics(h));

  std::string csv = "variant";
  for (const auto& ax : spec.axes) csv += "," + ax.field;
  csv += ",seed,metric,value\n";
  // Group runs of the same cell, keeping expansion order.
  std::vector<std::string> keys;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < res.runs.size(); ++i) {
    std::string key = res.runs[i].variant;
    for (const auto& v : res.runs[i].axis_values) key += "," + v;
    if (!groups.count(key)) keys.push_back(key);
    groups[key].push_back(i);
  }
  for (const auto& key : keys) {
    const auto& idx = groups[key];
    std::vector<std::string> metric_order;
    std::map<std::string, std::vector<double>> values;
    for (std::size_t i : idx) {
      for (const auto& [name, v] : finals[i]) {
        if (!values.count(name)) metric_order.push_back(name);
        values[name].push_back(v);
        csv += key + "," + std::to_string(res.runs[i].seed) + "," + name + "," + format_value(v) + "\n";
      }
    }
    for (const auto& name : metric_order) csv += key + ",median," + name + "," + format_value(median(values[name])) + "\n";
  }
  write_file(spec.output_dir + "/aggregate.csv", csv);
  Json manifest = Json::array();
  for (const auto& r : res.runs) manifest.push_back({{"variant", r.variant}, {"seed", r.seed}, {"dir", r.dir}});
  write_file(spec.output_dir + "/runs.json", manifest.dump(2) + "\n");
  res.aggregate_csv = std::move(csv);
  return res;
}

SweepResult cmd_sweep(const std::string& sweep_file, bool force) {
  return run_sweep(parse_sweep(read_file(sweep_file), fs::path(sweep_file).parent_path().string()), force);
}

ProbeReport cmd_probe(const std::string& checkpoint, const std::string& split_dir, int probe_patch,
                      const std::string& out_csv) {
  std::string cfg_text;
  uda::TrainState s = load_checkpoint(checkpoint, &cfg_text);
  const synth::Dataset ds = read_split(split_dir);
  const Json m = Json::parse(read_file(split_dir + "/manifest.json"));
  const int classes = m.at("num_classes").get<int>();
  const auto& arch = s.student.descriptor();
  if (arch.kind != nn::ModelKind::kSegmenter || arch.num_classes != classes ||
      ds.samples.front().image.dim(0) != static_cast<std::size_t>(arch.in_channels)) {
    throw CheckpointError("checkpoint architecture does not match dataset '" + split_dir + "'");
  }
  if (ds.sealed()) throw ConfigError("cannot probe on a sealed split");
  const int patch = probe_patch > 0 ? probe_patch : static_cast<int>(ds.samples.front().image.dim(1) / 2);
  std::vector<const ag::Tensor*> images;
  std::vector<const std::vector<int>*> labels;
  for (const auto& smp : ds.samples) {
    images.push_back(&smp.image);
    labels.push_back(&smp.label);
  }
  const auto cm = eval::context_probe_confusion(s.student, images, labels, patch);
  ProbeReport r;
  r.miou = cm.miou();
  r.per_class = cm.iou();
  r.csv = "metric,class,value\nprobe_miou,," + format_value(r.miou) + "\n";
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    r.csv += "probe_iou," + std::to_string(k) + "," + format_value(r.per_class[k]) + "\n";
  }
  if (!out_csv.empty()) write_file(out_csv, r.csv);
  return r;
}

}  // namespace miclab::harness
