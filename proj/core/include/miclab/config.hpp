#pragma once

#include <cstdint>
#include <string>

#include "miclab/synthworlds.hpp"
#include "miclab/uda.hpp"

namespace miclab::harness {

enum class TaskKind { kSegmentation, kClassification };
std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

// Dataset sizes, seeds and generator spec. Target training labels are sealed.
struct DatasetConfig {
  TaskKind kind = TaskKind::kSegmentation;
  synth::SceneSpec spec = synth::SceneSpec::default_spec();
  std::size_t source_train = 500;
  std::size_t target_train = 500;
  std::size_t target_val = 100;
  std::size_t source_val = 0;
  std::uint64_t source_seed = 1;
  std::uint64_t target_seed = 2;
  // Generated dataset directory; empty means generate in memory.
  std::string path;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ExperimentConfig {
  std::string name = "run";
  std::string output_dir = "runs/run";
  DatasetConfig data;
  uda::TrainConfig train;
  int checkpoint_interval = 0;  // 0: final checkpoint only
  bool probe = true;            // context probe after the last step
  int probe_patch = 0;          // 0: half the image height
  void validate() const;
};

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

// Defaults used by the benchmark runs.
ExperimentConfig default_experiment();

// Structured-text (JSON) form. parse(serialize(c)) == c for every valid c.
std::string serialize_config(const ExperimentConfig& cfg);
// Missing keys keep their defaults; unknown keys and type errors throw
// ConfigError naming the field path.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

std::string serialize_dataset_config(const DatasetConfig& d);
DatasetConfig parse_dataset_config(const std::string& text);

// Sets a dotted field path (e.g. "mic.mask_ratio") to a JSON literal.
// Throws ConfigError for unknown fields.
ExperimentConfig with_field(const ExperimentConfig& cfg, const std::string& field, const std::string& json_value);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace miclab::harness
