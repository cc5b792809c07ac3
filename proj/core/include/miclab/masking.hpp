#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "miclab/pseudo_label.hpp"
#include "miclab/rng.hpp"
#include "miclab/tensor.hpp"

namespace miclab::aug {

// Binary patch mask: 1 = keep, 0 = masked. Constant on every b x b cell.
struct PatchMask {
  std::size_t height = 0;
  std::size_t width = 0;
  int patch_size = 1;
  double mask_ratio = 0.0;
  std::vector<std::uint8_t> keep;  // [H*W]
  std::vector<double> draws;       // one uniform per cell, row-major

  bool kept(std::size_t y, std::size_t x) const { return keep[y * width + x] != 0; }
  std::size_t masked_pixels() const;
  double masked_fraction() const;
};

// One uniform draw v per cell in row-major cell order; a cell is kept iff v > r.
PatchMask sample_patch_mask(std::size_t height, std::size_t width, int patch_size, double mask_ratio,
                            Rng& rng);

// x^M = M (.) x for image[C,H,W]: masked pixels become exactly 0 in every channel.
ag::Tensor apply_mask(const PatchMask& mask, const ag::Tensor& image);

// Patch size used when training at a reduced resolution: halved per halving
// of the input (b / 2^k for a 2^k downscale).
int rescale_patch_size(int patch_size, int downscale_factor);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugParams {
  Range brightness_delta{-0.2, 0.2};
  Range contrast_factor{0.75, 1.25};
  Range saturation_factor{0.75, 1.25};
  Range hue_shift{-0.05, 0.05};  // turns
  Range blur_sigma{0.0, 1.0};
  double blur_probability = 0.5;
  bool enable = true;

  // Every transform at its identity value.
  static AugParams neutral();
};

// Concrete factors drawn from AugParams.
struct AugDraw {
  double brightness = 0.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
  double blur_sigma = 0.0;
};

AugDraw sample_aug(const AugParams& params, Rng& rng);

// Brightness, contrast (about the image mean gray), saturation (about each
// pixel's gray), hue rotation in HSV, optional Gaussian blur; clamped to [0,1].
ag::Tensor apply_color_transform(const ag::Tensor& image, const AugDraw& draw);

// Draws factors and applies them; identity when params.enable is false.
// Throws RangeError for inputs outside [0,1].
ag::Tensor color_augment(const ag::Tensor& image, const AugParams& params, Rng& rng);

struct MixedSample {
  ag::Tensor image;             // [C,H,W]
  std::vector<int> label;       // [H*W]
  std::vector<double> weight;   // [H*W]: 1 on pasted pixels, q on target pixels
  std::vector<int> pasted_classes;
};

// Pastes the pixels of ceil(K/2) randomly chosen source classes (of the K
// present) onto the target image and its pseudo-label.
MixedSample class_mix(const ag::Tensor& src_image, std::span<const int> src_label,
                      const ag::Tensor& tgt_image, const pl::PseudoLabel& tgt_pl, Rng& rng);

}  // namespace miclab::aug
