#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "miclab/tensor.hpp"

namespace miclab::synth {

enum class Domain { kSource, kTarget };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

// Segmentation palette.
enum SegClass : int {
  kBackground = 0,
  kRegionA = 1,
  kRegionB = 2,
  kStripe = 3,  // disambiguator: always borders region A, never region B
  kBlob = 4,
  kDistractor = 5,
};
inline constexpr int kNumSegClasses = 6;

// Classification palette; the last two classes share shape and differ by
// texture on the source domain and only by the corner marker on the target.
enum ClsClass : int { kSquare = 0, kDisk = 1, kCrossPlain = 2, kCrossMarked = 3 };
inline constexpr int kNumClsClasses = 4;

enum class Pattern { kFlat, kHStripes, kVStripes, kChecker, kDots, kDiagonal };

std::string to_string(Pattern p);
Pattern pattern_from_string(const std::string& s);

struct Texture {
  std::array<double, 3> color{0.5, 0.5, 0.5};
  Pattern pattern = Pattern::kFlat;
  double amplitude = 0.0;  // pattern contrast
  int period = 4;          // pixels
  double grain = 0.0;      // per-pixel uniform texture noise amplitude
  friend bool operator==(const Texture&, const Texture&) = default;
};

// Appearance shift applied when rendering the target domain.
struct DomainShift {
  std::array<double, 3> tint{0.0, 0.0, 0.0};  // added to every pixel
  double noise_sigma = 0.0;                  // additive Gaussian noise
  bool merge_ab = false;                     // target region A and B share one texture
  double merge_blend = 1.0;                  // 0 = A's texture, 1 = B's texture
  friend bool operator==(const DomainShift&, const DomainShift&) = default;
};

struct SceneSpec {
  int resolution = 32;
  std::array<Texture, kNumSegClasses> textures;
  double sensor_noise = 0.02;  // both domains
  // Probability that a source scene renders A and B with one shared texture
  // (A's or B's, equally likely), so source training also rewards context.
  double source_ambiguity = 0.0;
  DomainShift target_shift;

  // Layout, in pixels.
  int min_region = 8;
  int max_region = 14;
  int stripe_thickness = 2;
  int a_regions = 1;
  int b_regions = 1;
  int max_blobs = 1;
  int max_distractors = 2;
  int margin = 1;  // free pixels kept between placed objects

  bool ambiguity() const { return target_shift.merge_ab; }
  void validate() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;

  static SceneSpec default_spec();
  // No A/B texture merge and a mild shift: local appearance is enough.
  static SceneSpec easy_spec();
};

struct Sample {
  ag::Tensor image;        // [3,H,W] in [0,1]
  std::vector<int> label;  // [H*W], or one entry for classification
  Domain domain = Domain::kSource;
  std::uint64_t seed = 0;
};

// Splits draw per-sample seeds from disjoint index ranges.
enum class Split { kTrain, kVal, kTest };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Dataset {
  std::vector<Sample> samples;
  // Target-domain training labels are kept out of `samples` and only handed
  // to evaluation or to supervised-target runs.
  std::vector<std::vector<int>> sealed_labels;
  bool sealed() const { return !sealed_labels.empty(); }
};

std::uint64_t sample_seed(std::uint64_t seed, Split split, std::size_t index);

// Deterministic per (spec, domain, split, seed). Target training splits come
// back sealed. Throws ConfigError for n == 0 or an infeasible spec.
Dataset generate_dataset(const SceneSpec& spec, Domain domain, std::size_t n, std::uint64_t seed,
                         Split split = Split::kTrain);

Sample generate_scene(const SceneSpec& spec, Domain domain, std::uint64_t sample_seed);

// Classification analogue: one dominant object per image, label has one entry.
Dataset generate_cls_dataset(const SceneSpec& spec, Domain domain, std::size_t n, std::uint64_t seed,
                             Split split = Split::kTrain);

struct AdjacencyStats {
  std::size_t a_components = 0;
  std::size_t a_touching_stripe = 0;
  std::size_t b_components = 0;
  std::size_t b_touching_stripe = 0;
};

// Counts 4-connected A/B components and how many of them border a stripe pixel.
AdjacencyStats adjacency_stats(const std::vector<int>& label, std::size_t height, std::size_t width);

// Stacks images into [N,3,H,W].
ag::Tensor stack_images(const std::vector<const ag::Tensor*>& images);

}  // namespace miclab::synth
