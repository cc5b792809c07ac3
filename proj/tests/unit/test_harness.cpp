#include <cstdlib>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "miclab/commands.hpp"
#include "miclab/errors.hpp"
#include "miclab/persist.hpp"

using namespace miclab;
using namespace miclab::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const char* env = std::getenv("MICLAB_TEST_TMP");
  const fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "miclab_unit";
  const fs::path p = root / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny_experiment(const fs::path& out) {
  ExperimentConfig c = default_experiment();
  c.name = "tiny";
  c.output_dir = out.string();
  c.data.source_train = 8;
  c.data.target_train = 8;
  c.data.target_val = 4;
  c.train.arch.encoder_widths = {4, 4, 8, 8};
  c.train.arch.decoder_widths = {4, 4, 4};
  c.train.mic.enabled = true;
  c.train.steps = 6;
  c.train.warmup_steps = 2;
  c.train.batch_size = 2;
  c.train.eval_interval = 3;
  return c;
}

}  // namespace

TEST_CASE("config round trip") {
  ExperimentConfig c = default_experiment();
  c.train.mic.enabled = true;
  c.train.mic.loss_region = uda::LossRegion::kMasked;
  c.train.mic.mask_source = true;
  c.train.host = uda::HostMethod::kEntropyMin;
  c.train.aug.hue_shift = {-0.01, 0.02};
  c.data.spec.target_shift.tint = {0.1, 0.2, 0.3};
  const std::string text = serialize_config(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(back == c);
  CHECK(serialize_config(back) == text);
  const DatasetConfig d = parse_dataset_config(serialize_dataset_config(c.data));
  CHECK(d == c.data);
}

TEST_CASE("missing keys keep defaults and bad keys name their path") {
  const ExperimentConfig c = parse_config(R"({"mic": {"enabled": true}})");
  CHECK(c.train.mic.enabled);
  CHECK(c.train.steps == default_experiment().train.steps);
  try {
    parse_config(R"({"mic": {"enabled": true, "bogus": 1}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("mic.bogus") != std::string::npos);
  }
  try {
    parse_config(R"({"train": {"steps": "many"}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.steps") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"mic": {"patch_size": 5}})"), ConfigError);
}

TEST_CASE("with_field sets dotted paths") {
  const auto c = with_field(default_experiment(), "mic.mask_ratio", "0.5");
  CHECK(c.train.mic.mask_ratio == 0.5);
  CHECK(with_field(c, "host.method", "\"entropy_min\"").train.host == uda::HostMethod::kEntropyMin);
  CHECK_THROWS_AS(with_field(c, "mic.nope", "1"), ConfigError);
}

TEST_CASE("sweep expansion: 2 x 2 grid x 2 seeds") {
  const auto spec = parse_sweep(R"({
    "output_dir": "out",
    "seeds": [0, 1],
    "base": {"mic": {"enabled": true}},
    "axes": [{"field": "mic.patch_size", "values": [4, 8]},
             {"field": "mic.mask_ratio", "values": [0.3, 0.5]}]
  })");
  const auto runs = expand_sweep(spec);
  REQUIRE(runs.size() == 8);
  std::set<std::string> dirs;
  for (const auto& r : runs) {
    dirs.insert(r.dir);
    CHECK(r.config.train.seed == r.seed);
    CHECK(r.config.train.mic.enabled);
    CHECK(r.config.output_dir == r.dir);
  }
  CHECK(dirs.size() == 8);
  CHECK(runs[0].config.train.mic.patch_size == 4);
  CHECK(runs[0].config.train.mic.mask_ratio == 0.3);
  CHECK(runs.back().config.train.mic.patch_size == 8);
  CHECK(runs.back().config.train.mic.mask_ratio == 0.5);
}

TEST_CASE("sweep variants produce ablation rows") {
  const auto spec = parse_sweep(R"({
    "seeds": [3],
    "variants": [{"name": "full"},
                 {"name": "no_masking", "set": {"mic.mask_ratio": 0.0}},
                 {"name": "no_quality_weight", "set": {"mic.use_quality_weight": false}}]
  })");
  const auto runs = expand_sweep(spec);
  REQUIRE(runs.size() == 3);
  CHECK(runs[0].variant == "full");
  CHECK(runs[1].config.train.mic.mask_ratio == 0.0);
  CHECK_FALSE(runs[2].config.train.mic.use_quality_weight);
  CHECK(runs[2].config.train.seed == 3);
  CHECK_THROWS_AS(parse_sweep(R"({"colour": 1})"), ConfigError);
  CHECK_THROWS_AS(expand_sweep(parse_sweep(R"({"axes": [{"field": "mic.none", "values": [1]}]})")), ConfigError);
}

TEST_CASE("median") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
}

TEST_CASE("metrics csv round trip and empty history") {
  CHECK(metrics_csv({}) == std::string(kMetricsHeader) + "\n");
  const std::vector<uda::MetricPoint> h{{3, "target_val", "miou", -1, 0.125}, {3, "target_val", "iou", 2, 0.5}};
  CHECK(parse_metrics_csv(metrics_csv(h)) == h);
}

TEST_CASE("array files round trip and reject corruption") {
  const fs::path dir = scratch("arrays");
  const std::string f = (dir / "a.bin").string();
  write_array_f64(f, {2, 3}, {1, 2, 3, 4, 5, 6.5});
  std::vector<std::uint64_t> shape;
  CHECK(read_array_f64(f, &shape) == std::vector<double>{1, 2, 3, 4, 5, 6.5});
  CHECK(shape == std::vector<std::uint64_t>{2, 3});
  CHECK_THROWS_AS(read_array_i32(f), IOError);
}

TEST_CASE("experiment pipeline: checkpoints, resume, warm start, probe, report") {
  const fs::path root = scratch("pipeline");
  const ExperimentConfig cfg = tiny_experiment(root / "full");
  const RunResult full = run_experiment(cfg);
  CHECK(full.finished);
  const std::string metrics = read_file((root / "full/metrics.csv").string());
  for (const char* f : {"config.json", "dataset.json", "timing.csv", "final.ckpt"})
    CHECK(fs::exists(root / "full" / f));

  SUBCASE("same seed gives identical metrics") {
    auto again = cfg;
    again.output_dir = (root / "again").string();
    run_experiment(again);
    CHECK(read_file((root / "again/metrics.csv").string()) == metrics);
  }

  SUBCASE("existing output needs force") {
    CHECK_THROWS_AS(run_experiment(cfg), IOError);
  }

  SUBCASE("checkpoint save, load, save is byte identical") {
    std::string cfg_text;
    const auto state = load_checkpoint((root / "full/final.ckpt").string(), &cfg_text);
    CHECK(state.step == cfg.train.steps);
    CHECK(parse_config(cfg_text) == cfg);
    save_checkpoint((root / "copy.ckpt").string(), state, cfg_text);
    CHECK(read_file((root / "copy.ckpt").string()) == read_file((root / "full/final.ckpt").string()));
  }

  SUBCASE("corrupt checkpoints are rejected") {
    const std::string bytes = read_file((root / "full/final.ckpt").string());
    std::string bad = bytes;
    bad[0] = 'X';
    write_file((root / "bad.ckpt").string(), bad);
    CHECK_THROWS_AS(load_checkpoint((root / "bad.ckpt").string()), CheckpointError);
    write_file((root / "short.ckpt").string(), bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint((root / "short.ckpt").string()), IOError);
    nn::ArchDescriptor other = cfg.train.arch;
    other.num_classes = 4;
    CHECK_THROWS_AS(load_checkpoint((root / "full/final.ckpt").string(), nullptr, &other), CheckpointError);
  }

  SUBCASE("stop and resume reproduces the uninterrupted run") {
    auto part = cfg;
    part.output_dir = (root / "part").string();
    RunOptions stop;
    stop.stop_at = 4;
    CHECK_FALSE(run_experiment(part, stop).finished);
    RunOptions resume;
    resume.resume = (root / "part/checkpoints/step_0000004.ckpt").string();
    resume.force = true;
    CHECK(run_experiment(part, resume).finished);
    CHECK(read_file((root / "part/metrics.csv").string()) == metrics);
  }

  SUBCASE("warm start from a shared warmup matches a fresh run") {
    auto warm = cfg;
    warm.train.mic.enabled = false;
    warm.output_dir = (root / "warmup").string();
    RunOptions stop;
    stop.stop_at = cfg.train.warmup_steps;
    run_experiment(warm, stop);
    auto target = cfg;
    target.output_dir = (root / "warm").string();
    RunOptions w;
    w.warm_start = (root / "warmup/checkpoints/step_0000002.ckpt").string();
    run_experiment(target, w);
    CHECK(read_file((root / "warm/metrics.csv").string()) == metrics);
    // Incompatible configs are refused.
    auto other = cfg;
    other.train.lr = 0.01;
    other.output_dir = (root / "other").string();
    CHECK_THROWS_AS(run_experiment(other, w), ConfigError);
  }

  SUBCASE("probe matches the stored probe and checks architecture") {
    generate_to(cfg.data, (root / "data").string(), false);
    const auto rep = cmd_probe((root / "full/final.ckpt").string(), (root / "data/target_val").string(), 0);
    double stored = -1.0;
    for (const auto& [k, v] : final_metrics(full.history))
      if (k == "probe_miou") stored = v;
    CHECK(rep.miou == doctest::Approx(stored).epsilon(1e-12));
    CHECK_THROWS_AS(cmd_probe((root / "full/final.ckpt").string(), (root / "data/target_train").string(), 0),
                    ConfigError);

    DatasetConfig cls = cfg.data;
    cls.kind = TaskKind::kClassification;
    generate_to(cls, (root / "cls").string(), false);
    CHECK_THROWS_AS(cmd_probe((root / "full/final.ckpt").string(), (root / "cls/target_val").string(), 0),
                    CheckpointError);
  }
}

TEST_CASE("zero-step run writes a header-only metrics file") {
  const fs::path root = scratch("zero");
  auto cfg = tiny_experiment(root / "run");
  cfg.train.steps = 0;
  cfg.train.warmup_steps = 0;
  cfg.probe = false;
  const auto r = run_experiment(cfg);
  CHECK(r.history.empty());
  CHECK(read_file((root / "run/metrics.csv").string()) == std::string(kMetricsHeader) + "\n");
}

TEST_CASE("generate is deterministic and writes a manifest") {
  const fs::path root = scratch("generate");
  DatasetConfig d;
  d.source_train = 5;
  d.target_train = 4;
  d.target_val = 3;
  generate_to(d, (root / "a").string(), false);
  generate_to(d, (root / "b").string(), false);
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    CHECK(read_file(e.path().string()) == read_file((root / "b" / rel).string()));
  }
  CHECK(fs::exists(root / "a/target_train/labels.sealed.bin"));
  CHECK_FALSE(fs::exists(root / "a/target_train/labels.bin"));
  const auto splits = read_splits((root / "a").string());
  CHECK(splits.source_train.samples.size() == 5);
  CHECK(splits.target_train.samples.size() == 4);
  CHECK(splits.target_train.sealed());
  CHECK(splits.target_val.samples.size() == 3);
  CHECK(dataset_hash(splits) == dataset_hash(generate_splits(d)));
  CHECK_THROWS_AS(generate_to(d, (root / "a").string(), false), IOError);
  CHECK_NOTHROW(generate_to(d, (root / "a").string(), true));
}

TEST_CASE("report medians over a three-run fixture") {
  const fs::path root = scratch("report");
  const double scores[] = {0.5, 0.9, 0.7};
  for (int s = 0; s < 3; ++s) {
    auto cfg = tiny_experiment(root / ("seed_" + std::to_string(s)));
    cfg.name = "fixture";
    cfg.train.seed = static_cast<std::uint64_t>(s);
    fs::create_directories(cfg.output_dir);
    write_file(cfg.output_dir + "/config.json", serialize_config(cfg));
    const std::vector<uda::MetricPoint> h{{3, "target_val", "miou", -1, 0.1},
                                          {6, "target_val", "miou", -1, scores[s]},
                                          {6, "target_val", "probe_miou", -1, scores[s] / 2}};
    write_file(cfg.output_dir + "/metrics.csv", metrics_csv(h));
  }
  fs::create_directories(root / "_scratch/ignored");
  write_file((root / "_scratch/ignored/config.json").string(), "{}");
  const auto rep = cmd_report({root.string()}, (root / "out").string());
  CHECK(rep.markdown.find("| fixture | mic(self_training) | 3 | 0.7000 | 0.3500 |") != std::string::npos);
  CHECK(rep.heatmap_svg.empty());
  CHECK(fs::exists(root / "out/report.md"));
  CHECK(fs::exists(root / "out/curves.svg"));
  std::size_t lines = 0;
  for (char ch : rep.csv) lines += ch == '\n';
  CHECK(lines == 4);

  fs::create_directories(root / "broken");
  write_file((root / "broken/config.json").string(), serialize_config(tiny_experiment(root / "broken")));
  CHECK_THROWS_AS(cmd_report({(root / "broken").string()}, ""), IOError);
}

TEST_CASE("sweep results do not depend on the worker count") {
  const fs::path root = scratch("workers");
  SweepSpec spec;
  spec.base = tiny_experiment(root);
  spec.seeds = {0, 1};
  spec.axes = {SweepAxis{"mic.mask_ratio", {"0.3", "0.5"}}};
  spec.output_dir = (root / "serial").string();
  const auto serial = run_sweep(spec, false);
  spec.workers = 3;
  spec.output_dir = (root / "threaded").string();
  const auto threaded = run_sweep(spec, false);
  REQUIRE(serial.runs.size() == 4);
  REQUIRE(threaded.runs.size() == 4);
  CHECK(serial.aggregate_csv == threaded.aggregate_csv);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(read_file(serial.runs[i].dir + "/metrics.csv") == read_file(threaded.runs[i].dir + "/metrics.csv"));
}
