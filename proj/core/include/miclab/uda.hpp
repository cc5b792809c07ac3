#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miclab/masking.hpp"
#include "miclab/nn.hpp"
#include "miclab/pseudo_label.hpp"
#include "miclab/rng.hpp"
#include "miclab/synthworlds.hpp"

namespace miclab::uda {

enum class HostMethod { kSourceOnly, kEntropyMin, kAdversarial, kSelfTraining, kSupervisedTarget };
std::string to_string(HostMethod m);
HostMethod host_method_from_string(const std::string& s);

// Which pixels of the masked student prediction are supervised.
enum class LossRegion { kMasked, kUnmasked, kAll };
std::string to_string(LossRegion r);
LossRegion loss_region_from_string(const std::string& s);

struct LossWeights {
  double target = 1.0;  // host adaptation loss
  double mic = 1.0;
  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct MicConfig {
  bool enabled = false;
  int patch_size = 8;
  double mask_ratio = 0.7;
  bool mask_source = false;
  bool mask_target = true;
  LossRegion loss_region = LossRegion::kAll;
  bool use_color_aug = true;
  double ema_alpha = 0.99;
  double tau = 0.968;
  // Ablation switches.
  bool use_ema_teacher = true;     // false: pseudo-labels from the current student
  bool use_quality_weight = true;  // false: q forced to 1
  void validate() const;
  friend bool operator==(const MicConfig&, const MicConfig&) = default;
};

// Settings of the host methods.
struct HostConfig {
  double tau = 0.968;          // pseudo-label quality threshold
  bool mix_color_aug = true;   // color augmentation of class-mixed images
  double pl_noise = 0.0;       // fraction of pseudo-label components relabeled
  int disc_width = 16;
  double grl_lambda = 1.0;
  double disc_lr = 0.05;
  void validate() const;
  friend bool operator==(const HostConfig&, const HostConfig&) = default;
};

class EmaTeacher {
 public:
  EmaTeacher() = default;
  // Starts as an exact copy of the student. Throws ConfigError unless alpha is in [0,1).
  EmaTeacher(const nn::ModelParams& student, double alpha);

  const nn::ModelParams& params() const { return params_; }
  nn::ModelParams& params() { return params_; }
  double alpha() const { return alpha_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t t) { step_ = t; }

  // phi <- alpha phi + (1 - alpha) theta. ShapeError on layout mismatch.
  void update(const nn::ModelParams& student);

 private:
  nn::ModelParams params_;
  double alpha_ = 0.0;
  std::int64_t step_ = 0;
};

void ema_update(EmaTeacher& teacher, const nn::ModelParams& student);

// Mean cross-entropy of the student on labeled images. y holds N*H*W labels
// (N for classifiers). ConfigError for an empty batch.
ag::Tensor source_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x, std::span<const int> y);

// Pseudo-labels of the teacher on clean images, one per image.
std::vector<pl::PseudoLabel> teacher_pseudo_labels(const nn::ModelParams& teacher, const ag::Tensor& x, double tau);

// Masked, optionally augmented student inputs plus per-pixel targets.
struct MaskedBatch {
  ag::Tensor input;                  // [N,C,H,W]
  ag::PixelTargets targets;          // ignore outside the loss region; weight = q
  std::vector<aug::PatchMask> masks;
};

MaskedBatch build_masked_batch(const ag::Tensor& x, const std::vector<pl::PseudoLabel>& labels, const MicConfig& cfg,
                               bool classifier, const aug::AugParams& aug_params, Rng& mask_rng, Rng& aug_rng);

// q * CE(student(mask(aug(x))), p) restricted to cfg.loss_region.
ag::Tensor mic_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_t,
                    const std::vector<pl::PseudoLabel>& teacher_labels, const MicConfig& cfg,
                    const aug::AugParams& aug_params, Rng& mask_rng, Rng& aug_rng);

// Computes the teacher pseudo-labels on clean x_t first.
ag::Tensor mic_loss(ag::Graph& g, const nn::ModelParams& student, const nn::ModelParams& teacher,
                    const ag::Tensor& x_t, const MicConfig& cfg, const aug::AugParams& aug_params, Rng& mask_rng,
                    Rng& aug_rng);

// Masked consistency on source images supervised by ground truth at weight 1.
ag::Tensor mic_source_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_s,
                           std::span<const int> y_s, const MicConfig& cfg, const aug::AugParams& aug_params,
                           Rng& mask_rng, Rng& aug_rng);

// Mean normalized per-pixel entropy of the student prediction, in [0,1].
ag::Tensor entropy_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_t);

struct AdversarialLosses {
  // BCE(D(P_t), 1) on a detached discriminator path; reported only.
  ag::Tensor seg_side;
  // 0.5 [BCE(D(R(P_s)), 1) + BCE(D(R(P_t)), 0)] with R the gradient reversal:
  // one backward pass trains D to separate domains and the student to confuse D.
  ag::Tensor disc_side;
};

AdversarialLosses adversarial_losses(ag::Graph& g, const nn::ModelParams& student,
                                     const nn::DiscriminatorParams& disc, const ag::Tensor& x_s,
                                     const ag::Tensor& x_t);

// Class-mixed batch of source pixels over target pseudo-labels.
struct MixedBatch {
  ag::Tensor input;
  ag::PixelTargets targets;
  std::vector<std::vector<int>> pasted_classes;
};

MixedBatch build_mixed_batch(const ag::Tensor& x_s, std::span<const int> y_s, const ag::Tensor& x_t,
                             const std::vector<pl::PseudoLabel>& teacher_labels, bool color_aug,
                             const aug::AugParams& aug_params, Rng& mix_rng, Rng& aug_rng);

// Pixel-weighted cross-entropy of the student on the mixed batch. Classifiers
// skip mixing and use the q-weighted pseudo-label loss on the target images.
ag::Tensor self_training_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_s,
                              std::span<const int> y_s, const ag::Tensor& x_t,
                              const std::vector<pl::PseudoLabel>& teacher_labels, bool color_aug,
                              const aug::AugParams& aug_params, Rng& mix_rng, Rng& aug_rng);

// Loss terms of one step; undefined tensors are disabled terms.
struct LossTerms {
  ag::Tensor source;
  ag::Tensor target;
  ag::Tensor mic;
  ag::Tensor mic_source;
};

// L^S + lambda_T L^T + lambda_M (L^M + L^M_source) over the defined terms.
// ConfigError when no term is defined.
ag::Tensor total_objective(ag::Graph& g, const LossTerms& terms, const LossWeights& w);

struct TrainConfig {
  HostMethod host = HostMethod::kSelfTraining;
  MicConfig mic;
  LossWeights weights;
  HostConfig host_cfg;
  aug::AugParams aug;
  nn::ArchDescriptor arch;
  double lr = 0.05;
  double momentum = 0.9;
  int steps = 3000;
  // Leading steps trained on L^S only (stands in for a pretrained start).
  int warmup_steps = 0;
  int batch_size = 4;
  int eval_interval = 500;
  std::uint64_t seed = 0;
  void validate() const;
};

struct TrainData {
  const synth::Dataset* source_train = nullptr;
  const synth::Dataset* target_train = nullptr;  // sealed
  const synth::Dataset* target_val = nullptr;
  const synth::Dataset* source_val = nullptr;  // optional
};

struct MetricPoint {
  int step = 0;
  std::string split;
  std::string metric;
  int cls = -1;  // -1: not per-class
  double value = 0.0;
  friend bool operator==(const MetricPoint&, const MetricPoint&) = default;
};

// Running sums of the loss components since the last evaluation.
struct LossAccumulator {
  double source = 0.0, target = 0.0, mic = 0.0, quality = 0.0;
  std::int64_t steps = 0, quality_count = 0;
};

struct RngStreams {
  Rng data, mask, aug, mix, noise;
};

struct TrainState {
  nn::ModelParams student;
  EmaTeacher teacher;
  nn::SgdMomentum optimizer;
  std::optional<nn::DiscriminatorParams> disc;
  nn::SgdMomentum disc_optimizer;
  int step = 0;
  RngStreams rng;
  LossAccumulator accum;
  std::vector<MetricPoint> history;
};

TrainState init_state(const TrainConfig& cfg);

// Evaluation on the target (and optional source) validation split.
std::vector<MetricPoint> evaluate(const nn::ModelParams& model, const TrainData& data, int step);

using StepHook = std::function<void(const TrainState&)>;

// Advances state to `until_step`, evaluating every eval_interval steps and at
// cfg.steps. Throws NumericsError naming the step if a loss is not finite.
void run_steps(TrainState& state, const TrainConfig& cfg, const TrainData& data, int until_step,
               const StepHook& after_step = {});

TrainState train(const TrainConfig& cfg, const TrainData& data);

// Batch assembly helpers.
ag::Tensor gather_images(const synth::Dataset& ds, std::span<const std::size_t> idx);
std::vector<int> gather_labels(const std::vector<std::vector<int>>& labels, std::span<const std::size_t> idx);
std::vector<int> gather_labels(const synth::Dataset& ds, std::span<const std::size_t> idx);

}  // namespace miclab::uda
