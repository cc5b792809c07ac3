#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "miclab/ops.hpp"
#include "miclab/rng.hpp"
#include "miclab/tensor.hpp"

namespace miclab::nn {

enum class ModelKind { kSegmenter, kClassifier };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

// Layer widths of the encoder (stride-2 conv + ReLU stages) and the decoder
// (bilinear x2 upsample, skip concat, conv + ReLU). The classifier ignores
// decoder_widths.
struct ArchDescriptor {
  ModelKind kind = ModelKind::kSegmenter;
  int in_channels = 3;
  int num_classes = 6;
  std::vector<int> encoder_widths{16, 32, 64, 64};
  std::vector<int> decoder_widths{32, 16, 8};
  int kernel = 3;

  // Input H and W must be multiples of this.
  int downsample_factor() const { return 1 << encoder_widths.size(); }
  // Receptive field of the deepest encoder feature, in input pixels.
  int encoder_receptive_field() const;

  void validate() const;
  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

// Named parameter tensors in a fixed, architecture-determined order.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ArchDescriptor desc) : desc_(std::move(desc)) {}

  const ArchDescriptor& descriptor() const { return desc_; }

  void add(std::string name, ag::Tensor t);
  const ag::Tensor& get(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::size_t parameter_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  const std::pair<std::string, ag::Tensor>& at(std::size_t i) const { return params_.at(i); }
  std::pair<std::string, ag::Tensor>& at(std::size_t i) { return params_.at(i); }

  // Independent deep copy (teacher init).
  ModelParams clone() const;
  void set_requires_grad(bool on);
  void zero_grad();
  void clear_grad();
  bool same_layout(const ModelParams& other) const;

 private:
  ArchDescriptor desc_;
  std::vector<std::pair<std::string, ag::Tensor>> params_;
};

// He-initialized segmenter: forward(x[N,3,H,W]) -> logits[N,C,H,W].
ModelParams build_segmenter(const ArchDescriptor& desc, Rng& rng);
// Encoder + global average pool + linear head: logits[N,C,1,1].
ModelParams build_classifier(const ArchDescriptor& desc, Rng& rng);
ModelParams build_model(const ArchDescriptor& desc, Rng& rng);

// Closed-form parameter count of build_model(desc).
std::size_t expected_parameter_count(const ArchDescriptor& desc);

// Logits for either model kind. Throws ShapeError when H or W is not a
// multiple of the downsample factor.
ag::Tensor forward(ag::Graph& g, const ModelParams& params, const ag::Tensor& x);

// Softmax probabilities computed without recording (teacher / evaluation).
ag::Tensor predict_probs(const ModelParams& params, const ag::Tensor& x);

// Per-pixel argmax labels of predict_probs, one vector per image.
std::vector<std::vector<int>> predict_labels(const ModelParams& params, const ag::Tensor& x);

// Binary domain classifier over probability maps: three stride-2 convs, global
// average pool, one logit per image. Inputs pass through gradient reversal.
struct DiscriminatorParams {
  ModelParams params;
  double grl_lambda = 1.0;
};

DiscriminatorParams build_discriminator(int num_classes, int width, double grl_lambda, Rng& rng);

// Returns logits of shape [N,1,1,1].
ag::Tensor discriminator_forward(ag::Graph& g, const DiscriminatorParams& d, const ag::Tensor& probs,
                                 bool reverse_gradient);

// SGD with momentum: v <- mu v + grad; p <- p - lr v.
class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(const ModelParams& params, double lr, double momentum);

  void step(ModelParams& params);
  double lr() const { return lr_; }
  double momentum() const { return momentum_; }
  std::vector<std::vector<double>>& buffers() { return buffers_; }
  const std::vector<std::vector<double>>& buffers() const { return buffers_; }

 private:
  double lr_ = 0.0;
  double momentum_ = 0.0;
  std::vector<std::vector<double>> buffers_;
};

}  // namespace miclab::nn
