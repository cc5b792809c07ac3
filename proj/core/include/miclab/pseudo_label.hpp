#pragma once

#include <cstddef>
#include <vector>

#include "miclab/rng.hpp"
#include "miclab/tensor.hpp"

namespace miclab::pl {

// Hard teacher label map (or a single class for classification) with its
// image-level quality weight.
struct PseudoLabel {
  std::vector<int> labels;
  std::size_t height = 1;
  std::size_t width = 1;
  int num_classes = 0;
  double quality = 1.0;
  double tau = 0.0;
  bool classification = false;
};

// Per-pixel argmax of probs[C,H,W]; ties go to the lowest class index.
std::vector<int> pseudo_label_seg(const ag::Tensor& probs);

// Fraction of pixels whose max probability is strictly greater than tau.
double quality_seg(const ag::Tensor& probs, double tau);

// Maximum class probability of probs[C] (any shape with C elements).
double quality_cls(const ag::Tensor& probs);

PseudoLabel make_seg_pseudo_label(const ag::Tensor& probs, double tau);
PseudoLabel make_cls_pseudo_label(const ag::Tensor& probs);

// 4-connected components of a label map. Returns the component id of every
// pixel (ids are assigned in row-major order of first appearance).
std::vector<int> connected_components(const std::vector<int>& labels, std::size_t height,
                                      std::size_t width, int* count = nullptr);

// Relabels round-half-up(noise_frac * #components) uniformly chosen connected
// components to a uniformly chosen different class. Quality is unchanged.
PseudoLabel inject_pl_noise(const PseudoLabel& pl, double noise_frac, Rng& rng);

}  // namespace miclab::pl
