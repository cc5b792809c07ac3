#pragma once

#include <string>
#include <vector>

#include "miclab/config.hpp"
#include "miclab/persist.hpp"

namespace miclab::harness {

// Raises malloc thresholds so large temporaries are reused instead of being
// mapped and unmapped on every step. No-op outside glibc.
void tune_allocator();

// Writes the dataset described by a dataset-config file. An existing
// non-empty directory needs force (IOError otherwise).
void cmd_generate(const std::string& spec_file, const std::string& out_dir, bool force);
void generate_to(const DatasetConfig& cfg, const std::string& out_dir, bool force);

struct RunOptions {
  bool force = false;
  std::string resume;  // checkpoint to continue from
  // Checkpoint taken during the warmup phase of a compatible config (same
  // seed, data, model, optimizer and teacher momentum). Lets variants share
  // one warmup; the result is identical to an uninterrupted run.
  std::string warm_start;
  int stop_at = -1;    // stop (with a checkpoint) after this step; -1 runs to the end
  bool quiet = true;
};

struct RunResult {
  std::string dir;
  std::vector<uda::MetricPoint> history;
  bool finished = false;
};

// Trains one configuration into cfg.output_dir: config.json, dataset.json,
// metrics.csv, timing.csv, checkpoints/ and final.ckpt.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});
RunResult cmd_train(const std::string& config_file, const RunOptions& opts = {});

struct SweepAxis {
  std::string field;
  std::vector<std::string> values;  // JSON literals
};

struct SweepVariant {
  std::string name;
  std::vector<std::pair<std::string, std::string>> set;  // field -> JSON literal
};

struct SweepSpec {
  ExperimentConfig base = default_experiment();
  std::string output_dir = "runs/sweep";
  std::vector<std::uint64_t> seeds{0};
  std::vector<SweepAxis> axes;
  std::vector<SweepVariant> variants;
  int workers = 1;
};

// base_file entries resolve relative to base_dir.
SweepSpec parse_sweep(const std::string& text, const std::string& base_dir = "");

struct SweepRun {
  std::string variant;
  std::vector<std::string> axis_values;
  std::uint64_t seed = 0;
  std::string dir;
  ExperimentConfig config;
};

// Expands variants x grid cells x seeds; unknown fields throw ConfigError.
std::vector<SweepRun> expand_sweep(const SweepSpec& spec);

// Executes runs (on up to `workers` threads), sharing one warmup phase among
// runs whose configs agree up to warmup_steps. Warmup checkpoints go under
// scratch_dir. Returns each run's metric history. With `errors`, a failing
// run leaves an empty history and its message in errors[i] instead of
// aborting the batch.
std::vector<std::vector<uda::MetricPoint>> execute_runs(const std::vector<SweepRun>& runs,
                                                        const std::string& scratch_dir, int workers = 1,
                                                        std::vector<std::string>* errors = nullptr);

struct SweepResult {
  std::vector<SweepRun> runs;
  std::string aggregate_csv;
};

SweepResult run_sweep(const SweepSpec& spec, bool force);
SweepResult cmd_sweep(const std::string& sweep_file, bool force);

// Final-step summary metrics of one run, keyed by metric name (target_val
// miou/accuracy, iou_<k>, probe_miou, ...).
std::vector<std::pair<std::string, double>> final_metrics(const std::vector<uda::MetricPoint>& history);

double median(std::vector<double> v);

struct ProbeReport {
  double miou = 0.0;
  std::vector<double> per_class;
  std::string csv;
};

// Context probe of a checkpoint on a dataset split directory. probe_patch 0
// means half the image height. CheckpointError on architecture mismatch.
ProbeReport cmd_probe(const std::string& checkpoint, const std::string& split_dir, int probe_patch,
                      const std::string& out_csv = "");

struct Report {
  std::string markdown;
  std::string csv;
  std::string curves_svg;
  std::string heatmap_svg;  // empty unless the runs span a patch-size x mask-ratio grid
};

// Comparison tables and plots over run or sweep directories; written to
// out_dir when non-empty. IOError names any run without metrics.
Report cmd_report(const std::vector<std::string>& dirs, const std::string& out_dir);

}  // namespace miclab::harness
