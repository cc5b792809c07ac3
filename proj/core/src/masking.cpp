#include "miclab/masking.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "miclab/errors.hpp"

namespace miclab::aug {
namespace {

void check_image(const ag::Tensor& image, const char* what) {
  if (image.rank() != 3) {
    throw ShapeError(std::string(what) + ": image must be [C,H,W], got " + ag::shape_str(image.shape()));
  }
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0 + (b - r) / d;
  } else {
    h = 4.0 + (r - g) / d;
  }
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  if (s <= 0.0) {
    r = g = b = v;
    return;
  }
  const double hh = (h - std::floor(h)) * 6.0;
  const int sector = std::min(5, static_cast<int>(hh));
  const double f = hh - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

void gaussian_blur(std::vector<double>& data, std::size_t ch, std::size_t h, std::size_t w,
                   double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    s += k[i + radius];
  }
  for (double& v : k) v /= s;
  std::vector<double> tmp(data.size());
  const auto H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t c = 0; c < ch; ++c) {
    const double* src = data.data() + c * h * w;
    double* dst = tmp.data() + c * h * w;
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const long xx = std::clamp(x + i, 0L, W - 1);
          acc += k[i + radius] * src[y * W + xx];
        }
        dst[y * W + x] = acc;
      }
  }
  for (std::size_t c = 0; c < ch; ++c) {
    const double* src = tmp.data() + c * h * w;
    double* dst = data.data() + c * h * w;
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const long yy = std::clamp(y + i, 0L, H - 1);
          acc += k[i + radius] * src[yy * W + x];
        }
        dst[y * W + x] = acc;
      }
  }
}

}  // namespace

std::size_t PatchMask::masked_pixels() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
}

double PatchMask::masked_fraction() const {
  return keep.empty() ? 0.0 : static_cast<double>(masked_pixels()) / static_cast<double>(keep.size());
}

PatchMask sample_patch_mask(std::size_t height, std::size_t width, int patch_size, double mask_ratio,
                            Rng& rng) {
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0,1]");
  if (patch_size <= 0) throw ConfigError("patch size must be positive");
  const auto b = static_cast<std::size_t>(patch_size);
  if (height % b != 0 || width % b != 0) {
    throw ShapeError("mask size " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch size " + std::to_string(patch_size));
  }
  PatchMask m{height, width, patch_size, mask_ratio, std::vector<std::uint8_t>(height * width), {}};
  const std::size_t rows = height / b, cols = width / b;
  m.draws.resize(rows * cols);
  for (std::size_t cy = 0; cy < rows; ++cy) {
    for (std::size_t cx = 0; cx < cols; ++cx) {
      const double v = rng.uniform();
      m.draws[cy * cols + cx] = v;
      const std::uint8_t keep = v > mask_ratio ? 1 : 0;
      for (std::size_t y = cy * b; y < (cy + 1) * b; ++y)
        std::fill_n(m.keep.begin() + static_cast<long>(y * width + cx * b), b, keep);
    }
  }
  return m;
}

ag::Tensor apply_mask(const PatchMask& mask, const ag::Tensor& image) {
  check_image(image, "apply_mask");
  if (image.dim(1) != mask.height || image.dim(2) != mask.width) {
    throw ShapeError("apply_mask: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                     " vs image " + ag::shape_str(image.shape()));
  }
  ag::Tensor out = image.detach();
  const std::size_t plane = mask.height * mask.width;
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    double* d = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i)
      if (!mask.keep[i]) d[i] = 0.0;
  }
  return out;
}

int rescale_patch_size(int patch_size, int downscale_factor) {
  if (downscale_factor <= 0 || patch_size % downscale_factor != 0) {
    throw ConfigError("patch size " + std::to_string(patch_size) + " cannot be divided by " +
                      std::to_string(downscale_factor));
  }
  return patch_size / downscale_factor;
}

AugParams AugParams::neutral() {
  AugParams p;
  p.brightness_delta = {0.0, 0.0};
  p.contrast_factor = {1.0, 1.0};
  p.saturation_factor = {1.0, 1.0};
  p.hue_shift = {0.0, 0.0};
  p.blur_sigma = {0.0, 0.0};
  p.blur_probability = 0.0;
  return p;
}

AugDraw sample_aug(const AugParams& p, Rng& rng) {
  AugDraw d;
  d.brightness = rng.uniform(p.brightness_delta.lo, p.brightness_delta.hi);
  d.contrast = rng.uniform(p.contrast_factor.lo, p.contrast_factor.hi);
  d.saturation = rng.uniform(p.saturation_factor.lo, p.saturation_factor.hi);
  d.hue = rng.uniform(p.hue_shift.lo, p.hue_shift.hi);
  const bool blur = rng.bernoulli(p.blur_probability);
  const double sigma = rng.uniform(p.blur_sigma.lo, p.blur_sigma.hi);
  d.blur_sigma = blur ? sigma : 0.0;
  return d;
}

ag::Tensor apply_color_transform(const ag::Tensor& image, const AugDraw& d) {
  check_image(image, "color_augment");
  if (image.dim(0) != 3) throw ShapeError("color_augment: expects 3 channels");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::vector<double> px(image.values().begin(), image.values().end());
  double* r = px.data();
  double* g = r + plane;
  double* b = g + plane;

  for (double& v : px) v = clamp01(v + d.brightness);

  double mean_gray = 0.0;
  for (std::size_t i = 0; i < plane; ++i) mean_gray += 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  mean_gray /= static_cast<double>(plane);
  for (double& v : px) v = clamp01((v - mean_gray) * d.contrast + mean_gray);

  for (std::size_t i = 0; i < plane; ++i) {
    const double gray = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    r[i] = clamp01(gray + (r[i] - gray) * d.saturation);
    g[i] = clamp01(gray + (g[i] - gray) * d.saturation);
    b[i] = clamp01(gray + (b[i] - gray) * d.saturation);
  }

  if (d.hue != 0.0) {
    for (std::size_t i = 0; i < plane; ++i) {
      double hh, ss, vv;
      rgb_to_hsv(r[i], g[i], b[i], hh, ss, vv);
      hsv_to_rgb(hh + d.hue, ss, vv, r[i], g[i], b[i]);
    }
  }

  if (d.blur_sigma > 1e-3) gaussian_blur(px, 3, h, w, d.blur_sigma);
  for (double& v : px) v = clamp01(v);
  return ag::Tensor(image.shape(), std::move(px));
}

ag::Tensor color_augment(const ag::Tensor& image, const AugParams& params, Rng& rng) {
  check_image(image, "color_augment");
  for (double v : image.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw RangeError("color_augment: input values must lie in [0,1]");
  }
  if (!params.enable) return image.detach();
  return apply_color_transform(image, sample_aug(params, rng));
}

MixedSample class_mix(const ag::Tensor& src_image, std::span<const int> src_label,
                      const ag::Tensor& tgt_image, const pl::PseudoLabel& tgt_pl, Rng& rng) {
  check_image(src_image, "class_mix");
  check_image(tgt_image, "class_mix");
  if (src_image.shape() != tgt_image.shape()) {
    throw ShapeError("class_mix: source " + ag::shape_str(src_image.shape()) + " vs target " +
                     ag::shape_str(tgt_image.shape()));
  }
  const std::size_t ch = src_image.dim(0), plane = src_image.dim(1) * src_image.dim(2);
  if (src_label.size() != plane || tgt_pl.labels.size() != plane) {
    throw ShapeError("class_mix: label maps must match the image resolution");
  }
  std::set<int> present_set;
  for (int l : src_label)
    if (l >= 0) present_set.insert(l);
  std::vector<int> present(present_set.begin(), present_set.end());
  const std::size_t take = (present.size() + 1) / 2;
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.uniform_int(present.size() - i);
    std::swap(present[i], present[j]);
  }
  present.resize(take);
  std::sort(present.begin(), present.end());

  std::vector<std::uint8_t> paste(plane, 0);
  for (std::size_t i = 0; i < plane; ++i)
    paste[i] = std::binary_search(present.begin(), present.end(), src_label[i]) ? 1 : 0;

  MixedSample m;
  m.image = tgt_image.detach();
  m.label.resize(plane);
  m.weight.resize(plane);
  for (std::size_t c = 0; c < ch; ++c) {
    double* d = m.image.data() + c * plane;
    const double* s = src_image.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i)
      if (paste[i]) d[i] = s[i];
  }
  for (std::size_t i = 0; i < plane; ++i) {
    m.label[i] = paste[i] ? src_label[i] : tgt_pl.labels[i];
    m.weight[i] = paste[i] ? 1.0 : tgt_pl.quality;
  }
  m.pasted_classes = std::move(present);
  return m;
}

}  // namespace miclab::aug
