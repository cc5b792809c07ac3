#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "miclab/config.hpp"
#include "miclab/uda.hpp"

namespace miclab::harness {

// Flat array file: magic "MLARRAY1", u32 version, u32 dtype (1 = f64, 2 = i32),
// u32 rank, u64 dims[rank], then little-endian payload.
inline constexpr std::uint32_t kArrayVersion = 1;

void write_array_f64(const std::string& path, const std::vector<std::uint64_t>& shape, const std::vector<double>& data);
void write_array_i32(const std::string& path, const std::vector<std::uint64_t>& shape, const std::vector<int>& data);
std::vector<double> read_array_f64(const std::string& path, std::vector<std::uint64_t>* shape = nullptr);
std::vector<int> read_array_i32(const std::string& path, std::vector<std::uint64_t>* shape = nullptr);

struct DatasetSplits {
  synth::Dataset source_train;
  synth::Dataset target_train;  // sealed
  synth::Dataset target_val;
  synth::Dataset source_val;    // may be empty
};

// Generates every split described by the dataset config.
DatasetSplits generate_splits(const DatasetConfig& cfg);

// One directory per split with images.bin, labels.bin (labels.sealed.bin for
// the target training split) and manifest.json; a top-level manifest.json
// records the generating config and a content hash.
void write_splits(const DatasetSplits& d, const DatasetConfig& cfg, const std::string& dir);
DatasetSplits read_splits(const std::string& dir);
// Reads a single split directory (e.g. target_val).
synth::Dataset read_split(const std::string& split_dir);

// FNV-1a over all image and label payloads.
std::string dataset_hash(const DatasetSplits& d);

// Checkpoint: magic "MICLAB01", u32 format version, architecture descriptor,
// step, teacher step, rng states, loss accumulator, named parameter blocks
// (theta/, phi/, opt/, disc/, disc_opt/) and the metrics history.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const uda::TrainState& state, const std::string& config_json);
// Throws CheckpointError on bad magic, version or architecture mismatch and
// IOError on truncation. `config_json` receives the stored config when given.
uda::TrainState load_checkpoint(const std::string& path, std::string* config_json = nullptr,
                                const nn::ArchDescriptor* expected_arch = nullptr);

inline constexpr const char* kMetricsHeader = "step,split,metric,class,value";

std::string metrics_csv(const std::vector<uda::MetricPoint>& history);
std::vector<uda::MetricPoint> parse_metrics_csv(const std::string& text);
std::string format_value(double v);

}  // namespace miclab::harness
