#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "miclab/commands.hpp"
#include "miclab/errors.hpp"

namespace h = miclab::harness;

int main(int argc, char** argv) {
  h::tune_allocator();
  CLI::App app{"miclab: masked image consistency experiments on synthetic domain shifts"};
  app.require_subcommand(1);

  std::string spec_file, out_dir, config_file, sweep_file, checkpoint, split_dir, resume, warm_start;
  std::vector<std::string> run_dirs;
  bool force = false;
  int probe_patch = 0;
  int stop_at = -1;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset to disk");
  gen->add_option("spec", spec_file, "dataset config file")->required()->check(CLI::ExistingFile);
  gen->add_option("out", out_dir, "output directory")->required();
  gen->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "run one experiment");
  train->add_option("config", config_file, "experiment config file")->required()->check(CLI::ExistingFile);
  train->add_flag("--force", force, "overwrite a non-empty output directory");
  train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--warm-start", warm_start, "start from a warmup-phase checkpoint of a compatible config")
      ->check(CLI::ExistingFile)
      ->excludes("--resume");
  train->add_option("--stop-at", stop_at, "stop with a checkpoint after this step");

  auto* sweep = app.add_subcommand("sweep", "run a grid of experiments");
  sweep->add_option("sweep", sweep_file, "sweep file")->required()->check(CLI::ExistingFile);
  sweep->add_flag("--force", force, "overwrite a non-empty sweep directory");

  auto* probe = app.add_subcommand("probe", "context probe of a checkpoint");
  probe->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  probe->add_option("split", split_dir, "dataset split directory")->required()->check(CLI::ExistingDirectory);
  probe->add_option("--patch", probe_patch, "probe window size (0: half the image height)");
  probe->add_option("--out", out_dir, "CSV output file");

  auto* report = app.add_subcommand("report", "comparison tables and plots");
  report->add_option("dirs", run_dirs, "run or sweep directories")->required();
  report->add_option("--out", out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      h::cmd_generate(spec_file, out_dir, force);
    } else if (*train) {
      h::RunOptions o;
      o.force = force;
      o.resume = resume;
      o.warm_start = warm_start;
      o.stop_at = stop_at;
      o.quiet = false;
      const auto r = h::cmd_train(config_file, o);
      std::cout << r.dir << (r.finished ? "" : " (stopped early)") << "\n";
    } else if (*sweep) {
      const auto r = h::cmd_sweep(sweep_file, force);
      std::cout << r.aggregate_csv;
    } else if (*probe) {
      std::cout << h::cmd_probe(checkpoint, split_dir, probe_patch, out_dir).csv;
    } else if (*report) {
      std::cout << h::cmd_report(run_dirs, out_dir).markdown;
    }
  } catch (const miclab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
