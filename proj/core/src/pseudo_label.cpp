#include "miclab/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "miclab/errors.hpp"

namespace miclab::pl {
namespace {

struct ProbLayout {
  std::size_t classes;
  std::size_t plane;
};

ProbLayout check_normalized(const ag::Tensor& probs) {
  if (probs.rank() != 3) {
    throw ShapeError("segmentation probabilities must be [C,H,W], got " + ag::shape_str(probs.shape()));
  }
  const ProbLayout l{probs.dim(0), probs.dim(1) * probs.dim(2)};
  const double* p = probs.data();
  for (std::size_t i = 0; i < l.plane; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < l.classes; ++c) {
      const double v = p[c * l.plane + i];
      if (!(v >= 0.0)) throw NumericsError("probabilities must be non-negative and finite");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw NumericsError("probabilities at pixel " + std::to_string(i) + " sum to " + std::to_string(s));
    }
  }
  return l;
}

}  // namespace

std::vector<int> pseudo_label_seg(const ag::Tensor& probs) {
  const ProbLayout l = check_normalized(probs);
  const double* p = probs.data();
  std::vector<int> out(l.plane, 0);
  for (std::size_t i = 0; i < l.plane; ++i) {
    double best = p[i];
    for (std::size_t c = 1; c < l.classes; ++c) {
      if (p[c * l.plane + i] > best) {
        best = p[c * l.plane + i];
        out[i] = static_cast<int>(c);
      }
    }
  }
  return out;
}

double quality_seg(const ag::Tensor& probs, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("quality threshold tau must lie in (0,1)");
  const ProbLayout l = check_normalized(probs);
  const double* p = probs.data();
  std::size_t confident = 0;
  for (std::size_t i = 0; i < l.plane; ++i) {
    double mx = p[i];
    for (std::size_t c = 1; c < l.classes; ++c) mx = std::max(mx, p[c * l.plane + i]);
    if (mx > tau) ++confident;
  }
  return static_cast<double>(confident) / static_cast<double>(l.plane);
}

double quality_cls(const ag::Tensor& probs) {
  const auto v = probs.values();
  double s = 0.0;
  for (double x : v) {
    if (!(x >= 0.0)) throw NumericsError("probabilities must be non-negative and finite");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-6) throw NumericsError("class probabilities sum to " + std::to_string(s));
  return *std::max_element(v.begin(), v.end());
}

PseudoLabel make_seg_pseudo_label(const ag::Tensor& probs, double tau) {
  PseudoLabel pl;
  pl.labels = pseudo_label_seg(probs);
  pl.height = probs.dim(1);
  pl.width = probs.dim(2);
  pl.num_classes = static_cast<int>(probs.dim(0));
  pl.quality = quality_seg(probs, tau);
  pl.tau = tau;
  return pl;
}

PseudoLabel make_cls_pseudo_label(const ag::Tensor& probs) {
  PseudoLabel pl;
  pl.quality = quality_cls(probs);
  const auto v = probs.values();
  pl.labels = {static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin())};
  pl.num_classes = static_cast<int>(v.size());
  pl.classification = true;
  return pl;
}

std::vector<int> connected_components(const std::vector<int>& labels, std::size_t height,
                                      std::size_t width, int* count) {
  if (labels.size() != height * width) throw ShapeError("label map size mismatch");
  std::vector<int> comp(labels.size(), -1);
  std::vector<std::size_t> stack;
  int next = 0;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (comp[start] >= 0) continue;
    comp[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / width, x = i % width;
      auto visit = [&](std::size_t j) {
        if (comp[j] < 0 && labels[j] == labels[i]) {
          comp[j] = next;
          stack.push_back(j);
        }
      };
      if (y > 0) visit(i - width);
      if (y + 1 < height) visit(i + width);
      if (x > 0) visit(i - 1);
      if (x + 1 < width) visit(i + 1);
    }
    ++next;
  }
  if (count) *count = next;
  return comp;
}

PseudoLabel inject_pl_noise(const PseudoLabel& pl, double noise_frac, Rng& rng) {
  if (pl.classification) throw UnsupportedError("pseudo-label noise applies to segmentation labels only");
  if (!(noise_frac >= 0.0 && noise_frac <= 1.0)) throw ConfigError("noise fraction must lie in [0,1]");
  if (pl.num_classes < 2) throw ConfigError("noise injection needs at least two classes");
  int n_comp = 0;
  const std::vector<int> comp = connected_components(pl.labels, pl.height, pl.width, &n_comp);
  const auto k = static_cast<std::size_t>(std::floor(noise_frac * n_comp + 0.5));
  if (k == 0) return pl;

  std::vector<int> order(static_cast<std::size_t>(n_comp));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.uniform_int(order.size() - i);
    std::swap(order[i], order[j]);
  }
  std::vector<int> new_class(static_cast<std::size_t>(n_comp), -1);
  std::vector<int> comp_class(static_cast<std::size_t>(n_comp), 0);
  for (std::size_t i = 0; i < comp.size(); ++i) comp_class[static_cast<std::size_t>(comp[i])] = pl.labels[i];
  for (std::size_t i = 0; i < k; ++i) {
    const auto c = static_cast<std::size_t>(order[i]);
    // Uniform over the other num_classes - 1 classes.
    int draw = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(pl.num_classes - 1)));
    if (draw >= comp_class[c]) ++draw;
    new_class[c] = draw;
  }
  PseudoLabel out = pl;
  for (std::size_t i = 0; i < comp.size(); ++i) {
    const int nc = new_class[static_cast<std::size_t>(comp[i])];
    if (nc >= 0) out.labels[i] = nc;
  }
  return out;
}

}  // namespace miclab::pl
