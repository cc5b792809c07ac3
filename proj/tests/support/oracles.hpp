#pragma once

// Step-by-step reference implementations used to check the library. They
// share only primitives (model forward, RNG, color transform) with the code
// under test and recompute every loss with plain loops.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "miclab/masking.hpp"
#include "miclab/nn.hpp"
#include "miclab/pseudo_label.hpp"
#include "miclab/rng.hpp"
#include "miclab/uda.hpp"

namespace oracle {

using miclab::Rng;
using miclab::ag::Tensor;

inline Tensor image_of(const Tensor& batch, std::size_t i) {
  const std::size_t per = batch.numel() / batch.dim(0);
  std::vector<double> v(batch.data() + i * per, batch.data() + (i + 1) * per);
  return Tensor({batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(v));
}

inline Tensor stack(const std::vector<Tensor>& imgs) {
  std::vector<double> v;
  for (const auto& t : imgs) v.insert(v.end(), t.values().begin(), t.values().end());
  return Tensor({imgs.size(), imgs[0].dim(0), imgs[0].dim(1), imgs[0].dim(2)}, std::move(v));
}

// probs [N,C,H,W] (or [N,C]); per image: mean over labeled pixels of
// -w * log p[label]; then mean over images.
inline double cross_entropy(const Tensor& probs, const std::vector<int>& labels, const std::vector<double>& weights) {
  const std::size_t n = probs.dim(0), c = probs.dim(1), inner = probs.numel() / (n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < inner; ++p) {
      const int l = labels[i * inner + p];
      if (l < 0) continue;
      const double w = weights.empty() ? 1.0 : weights[i * inner + p];
      const double pr = probs.data()[(i * c + static_cast<std::size_t>(l)) * inner + p];
      acc -= w * std::log(std::max(pr, 1e-12));
      ++count;
    }
    if (count) total += acc / static_cast<double>(count);
  }
  return total / static_cast<double>(n);
}

inline double quality_seg(const Tensor& probs, double tau) {
  const std::size_t c = probs.dim(0), plane = probs.dim(1) * probs.dim(2);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    double best = -1.0;
    for (std::size_t k = 0; k < c; ++k) best = std::max(best, probs.data()[k * plane + p]);
    if (best > tau) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(plane);
}

inline double quality_cls(const Tensor& probs) {
  double best = 0.0;
  for (double v : probs.values()) best = std::max(best, v);
  return best;
}

inline double normalized_entropy(const Tensor& probs) {
  const std::size_t n = probs.dim(0), c = probs.dim(1), inner = probs.numel() / (n * c);
  double h = 0.0;
  for (double p : probs.values()) h -= p > 0.0 ? p * std::log(p) : 0.0;
  return h / (static_cast<double>(n * inner) * std::log(static_cast<double>(c)));
}

inline double entropy_loss(const miclab::nn::ModelParams& model, const Tensor& x) {
  return normalized_entropy(miclab::nn::predict_probs(model, x));
}

// Masked consistency loss, rebuilt from its definition: color-augment each
// target image, zero the masked patches, predict, and take the quality
// weighted cross-entropy against the teacher labels inside the loss region.
inline double mic_loss(const miclab::nn::ModelParams& student, const Tensor& x,
                       const std::vector<miclab::pl::PseudoLabel>& labels, const miclab::uda::MicConfig& cfg,
                       const miclab::aug::AugParams& aug, Rng mask_rng, Rng aug_rng) {
  using miclab::uda::LossRegion;
  const std::size_t n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3), b = static_cast<std::size_t>(cfg.patch_size);
  std::vector<Tensor> inputs;
  std::vector<int> target;
  std::vector<double> weight;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img = image_of(x, i);
    if (cfg.use_color_aug) img = miclab::aug::color_augment(img, aug, aug_rng);
    std::vector<double> keep(h * w);
    for (std::size_t cy = 0; cy < h / b; ++cy)
      for (std::size_t cx = 0; cx < w / b; ++cx) {
        const double k = mask_rng.uniform() > cfg.mask_ratio ? 1.0 : 0.0;
        for (std::size_t y = cy * b; y < (cy + 1) * b; ++y)
          for (std::size_t xx = cx * b; xx < (cx + 1) * b; ++xx) keep[y * w + xx] = k;
      }
    Tensor masked = img.clone();
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < h * w; ++p) masked.data()[c * h * w + p] *= keep[p];
    inputs.push_back(masked);
    const double q = cfg.use_quality_weight ? labels[i].quality : 1.0;
    for (std::size_t p = 0; p < h * w; ++p) {
      const bool kept = keep[p] != 0.0;
      const bool in = cfg.loss_region == LossRegion::kAll || (cfg.loss_region == LossRegion::kMasked ? !kept : kept);
      target.push_back(in ? labels[i].labels[p] : -1);
      weight.push_back(q);
    }
  }
  return cross_entropy(miclab::nn::predict_probs(student, stack(inputs)), target, weight);
}

// Class-mix self-training loss from its definition: paste half of the source
// classes (chosen by a partial shuffle) onto the target image, labels from the
// source where pasted and the teacher elsewhere (weighted by quality).
inline double self_training_loss(const miclab::nn::ModelParams& student, const Tensor& xs,
                                 const std::vector<int>& ys, const Tensor& xt,
                                 const std::vector<miclab::pl::PseudoLabel>& labels, bool color_aug,
                                 const miclab::aug::AugParams& aug, Rng mix_rng, Rng aug_rng) {
  const std::size_t n = xs.dim(0), ch = xs.dim(1), plane = xs.dim(2) * xs.dim(3);
  std::vector<Tensor> inputs;
  std::vector<int> target;
  std::vector<double> weight;
  for (std::size_t i = 0; i < n; ++i) {
    const int* src = ys.data() + i * plane;
    std::set<int> present_set(src, src + plane);
    present_set.erase(-1);
    std::vector<int> present(present_set.begin(), present_set.end());
    const std::size_t take = (present.size() + 1) / 2;
    for (std::size_t k = 0; k < take; ++k) std::swap(present[k], present[k + mix_rng.uniform_int(present.size() - k)]);
    const std::set<int> chosen(present.begin(), present.begin() + static_cast<long>(take));
    Tensor img = image_of(xt, i).clone();
    const Tensor s = image_of(xs, i);
    for (std::size_t p = 0; p < plane; ++p) {
      const bool paste = chosen.count(src[p]) > 0;
      if (paste)
        for (std::size_t c = 0; c < ch; ++c) img.data()[c * plane + p] = s.data()[c * plane + p];
      target.push_back(paste ? src[p] : labels[i].labels[p]);
      weight.push_back(paste ? 1.0 : labels[i].quality);
    }
    inputs.push_back(color_aug ? miclab::aug::color_augment(img, aug, aug_rng) : img);
  }
  return cross_entropy(miclab::nn::predict_probs(student, stack(inputs)), target, weight);
}

// Random probability tensor [N,C,H,W] with rows summing to one.
inline Tensor random_probs(std::size_t n, std::size_t c, std::size_t h, std::size_t w, Rng& rng, double sharpness = 2.0) {
  Tensor t({n, c, h, w});
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < plane; ++p) {
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double e = std::exp(sharpness * rng.normal());
        t.data()[(i * c + k) * plane + p] = e;
        z += e;
      }
      for (std::size_t k = 0; k < c; ++k) t.data()[(i * c + k) * plane + p] /= z;
    }
  return t;
}

inline Tensor random_tensor(const miclab::ag::Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

inline Tensor random_images(std::size_t n, std::size_t h, std::size_t w, Rng& rng) {
  Tensor t({n, 3, h, w});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

}  // namespace oracle
