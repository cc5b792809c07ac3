#include "miclab/synthworlds.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "miclab/errors.hpp"
#include "miclab/pseudo_label.hpp"
#include "miclab/rng.hpp"

namespace miclab::synth {
namespace {

constexpr int kSceneAttempts = 200;
constexpr int kPlacementAttempts = 60;

struct Rect {
  int y0, x0, h, w;
  int y1() const { return y0 + h; }
  int x1() const { return x0 + w; }
};

int draw_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
}

// Occupancy of placed objects; a rect is free when it and its margin ring
// overlap nothing already claimed.
class Canvas {
 public:
  Canvas(int size, int margin) : n_(size), margin_(margin), claimed_(static_cast<std::size_t>(size * size), 0) {}

  bool free(const Rect& r) const {
    for (int y = std::max(0, r.y0 - margin_); y < std::min(n_, r.y1() + margin_); ++y)
      for (int x = std::max(0, r.x0 - margin_); x < std::min(n_, r.x1() + margin_); ++x)
        if (claimed_[static_cast<std::size_t>(y * n_ + x)]) return false;
    return true;
  }
  void claim(const Rect& r) {
    for (int y = r.y0; y < r.y1(); ++y)
      for (int x = r.x0; x < r.x1(); ++x) claimed_[static_cast<std::size_t>(y * n_ + x)] = 1;
  }

 private:
  int n_;
  int margin_;
  std::vector<std::uint8_t> claimed_;
};

struct Layout {
  std::vector<int> label;
  // Region id per pixel (selects the pattern phase); 0 = background.
  std::vector<int> region;
  int regions = 1;
};

std::optional<Rect> place(Canvas& canvas, int size, int h, int w, Rng& rng) {
  if (h > size || w > size) return std::nullopt;
  for (int a = 0; a < kPlacementAttempts; ++a) {
    Rect r{draw_int(rng, 0, size - h), draw_int(rng, 0, size - w), h, w};
    if (canvas.free(r)) return r;
  }
  return std::nullopt;
}

void paint(Layout& l, int size, const Rect& r, int cls, int region) {
  for (int y = r.y0; y < r.y1(); ++y)
    for (int x = r.x0; x < r.x1(); ++x) {
      l.label[static_cast<std::size_t>(y * size + x)] = cls;
      l.region[static_cast<std::size_t>(y * size + x)] = region;
    }
}

std::optional<Layout> try_layout(const SceneSpec& s, Rng& rng) {
  const int n = s.resolution;
  Layout l{std::vector<int>(static_cast<std::size_t>(n * n), kBackground),
           std::vector<int>(static_cast<std::size_t>(n * n), 0), 1};
  Canvas canvas(n, s.margin);

  for (int i = 0; i < s.a_regions; ++i) {
    const int h = draw_int(rng, s.min_region, s.max_region);
    const int w = draw_int(rng, s.min_region, s.max_region);
    const int side = draw_int(rng, 0, 3);  // 0 top, 1 bottom, 2 left, 3 right
    const int t = s.stripe_thickness;
    const bool vertical = side < 2;
    const auto box = place(canvas, n, vertical ? h + t : h, vertical ? w : w + t, rng);
    if (!box) return std::nullopt;
    Rect region = *box, stripe = *box;
    switch (side) {
      case 0: stripe.h = t; region.y0 += t; region.h = h; break;
      case 1: region.h = h; stripe.y0 += h; stripe.h = t; break;
      case 2: stripe.w = t; region.x0 += t; region.w = w; break;
      default: region.w = w; stripe.x0 += w; stripe.w = t; break;
    }
    canvas.claim(*box);
    paint(l, n, region, kRegionA, l.regions++);
    paint(l, n, stripe, kStripe, l.regions++);
  }
  for (int i = 0; i < s.b_regions; ++i) {
    const int h = draw_int(rng, s.min_region, s.max_region);
    const int w = draw_int(rng, s.min_region, s.max_region);
    const auto box = place(canvas, n, h, w, rng);
    if (!box) return std::nullopt;
    canvas.claim(*box);
    paint(l, n, *box, kRegionB, l.regions++);
  }
  // Optional objects: skipped when they do not fit.
  const int blobs = draw_int(rng, 0, s.max_blobs);
  for (int i = 0; i < blobs; ++i) {
    const int ry = draw_int(rng, 2, 4), rx = draw_int(rng, 2, 4);
    const auto box = place(canvas, n, 2 * ry + 1, 2 * rx + 1, rng);
    if (!box) continue;
    canvas.claim(*box);
    const int id = l.regions++;
    for (int y = box->y0; y < box->y1(); ++y)
      for (int x = box->x0; x < box->x1(); ++x) {
        const double dy = (y - box->y0 - ry) / (ry + 0.5), dx = (x - box->x0 - rx) / (rx + 0.5);
        if (dy * dy + dx * dx <= 1.0) {
          l.label[static_cast<std::size_t>(y * n + x)] = kBlob;
          l.region[static_cast<std::size_t>(y * n + x)] = id;
        }
      }
  }
  const int distractors = draw_int(rng, 0, s.max_distractors);
  for (int i = 0; i < distractors; ++i) {
    const int side = draw_int(rng, 3, 5);
    const auto box = place(canvas, n, side, side, rng);
    if (!box) continue;
    canvas.claim(*box);
    paint(l, n, *box, kDistractor, l.regions++);
  }
  return l;
}

Texture merged_texture(const Texture& a, const Texture& b, double t) {
  Texture m;
  for (int c = 0; c < 3; ++c) m.color[static_cast<std::size_t>(c)] = (1.0 - t) * a.color[c] + t * b.color[c];
  m.pattern = t < 0.5 ? a.pattern : b.pattern;
  m.period = t < 0.5 ? a.period : b.period;
  m.amplitude = (1.0 - t) * a.amplitude + t * b.amplitude;
  m.grain = (1.0 - t) * a.grain + t * b.grain;
  return m;
}

double pattern_value(const Texture& tex, int y, int x) {
  const int half = std::max(1, tex.period / 2);
  switch (tex.pattern) {
    case Pattern::kFlat: return 0.0;
    case Pattern::kHStripes: return (y / half) % 2 ? 1.0 : -1.0;
    case Pattern::kVStripes: return (x / half) % 2 ? 1.0 : -1.0;
    case Pattern::kChecker: return (y / half + x / half) % 2 ? 1.0 : -1.0;
    case Pattern::kDots: return (y % tex.period == 0 && x % tex.period == 0) ? 1.0 : -0.25;
    case Pattern::kDiagonal: return ((x + y) / half) % 2 ? 1.0 : -1.0;
  }
  return 0.0;
}

// `shared` selects a source scene whose A and B share a texture: 1 = A's, 2 = B's.
std::array<Texture, kNumSegClasses> domain_textures(const SceneSpec& s, Domain d, int shared = 0) {
  auto tex = s.textures;
  if (d == Domain::kSource && shared == 1) tex[kRegionB] = tex[kRegionA];
  if (d == Domain::kSource && shared == 2) tex[kRegionA] = tex[kRegionB];
  if (d == Domain::kTarget && s.target_shift.merge_ab) {
    const Texture m = merged_texture(s.textures[kRegionA], s.textures[kRegionB], s.target_shift.merge_blend);
    tex[kRegionA] = m;
    tex[kRegionB] = m;
  }
  return tex;
}

// Renders a label/region layout. Draw order is identical for both domains.
// `tex_class` selects the texture of every pixel.
ag::Tensor render(const SceneSpec& s, Domain d, const std::vector<int>& tex_class, const std::vector<int>& region,
                  int regions, const std::array<Texture, kNumSegClasses>& tex, Rng& rng) {
  const int n = s.resolution;
  const auto plane = static_cast<std::size_t>(n * n);
  std::vector<int> phase_y(static_cast<std::size_t>(regions)), phase_x(static_cast<std::size_t>(regions));
  for (int r = 0; r < regions; ++r) {
    phase_y[static_cast<std::size_t>(r)] = draw_int(rng, 0, 15);
    phase_x[static_cast<std::size_t>(r)] = draw_int(rng, 0, 15);
  }
  const bool target = d == Domain::kTarget;
  const double sigma = target ? std::sqrt(s.sensor_noise * s.sensor_noise +
                                          s.target_shift.noise_sigma * s.target_shift.noise_sigma)
                              : s.sensor_noise;
  std::vector<double> px(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const int y = static_cast<int>(i) / n, x = static_cast<int>(i) % n;
    const Texture& t = tex[static_cast<std::size_t>(tex_class[i])];
    const auto r = static_cast<std::size_t>(region[i]);
    const double p = pattern_value(t, y + phase_y[r], x + phase_x[r]);
    const double grain = t.grain * (2.0 * rng.uniform() - 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      double v = t.color[c] + t.amplitude * p + grain + sigma * rng.normal();
      if (target) v += s.target_shift.tint[c];
      px[c * plane + i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return ag::Tensor({3, static_cast<std::size_t>(n), static_cast<std::size_t>(n)}, std::move(px));
}

std::uint64_t split_base(Split s) {
  switch (s) {
    case Split::kTrain: return 0;
    case Split::kVal: return std::uint64_t{1} << 40;
    case Split::kTest: return std::uint64_t{2} << 40;
  }
  return 0;
}

void seal_if_needed(Dataset& ds, Domain domain, Split split) {
  if (domain != Domain::kTarget || split != Split::kTrain) return;
  ds.sealed_labels.reserve(ds.samples.size());
  for (Sample& s : ds.samples) ds.sealed_labels.push_back(std::exchange(s.label, {}));
}

}  // namespace

std::string to_string(Domain d) { return d == Domain::kSource ? "source" : "target"; }

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::kSource;
  if (s == "target") return Domain::kTarget;
  throw ConfigError("unknown domain '" + s + "'");
}

std::string to_string(Pattern p) {
  switch (p) {
    case Pattern::kFlat: return "flat";
    case Pattern::kHStripes: return "hstripes";
    case Pattern::kVStripes: return "vstripes";
    case Pattern::kChecker: return "checker";
    case Pattern::kDots: return "dots";
    case Pattern::kDiagonal: return "diagonal";
  }
  return "flat";
}

Pattern pattern_from_string(const std::string& s) {
  for (Pattern p : {Pattern::kFlat, Pattern::kHStripes, Pattern::kVStripes, Pattern::kChecker, Pattern::kDots,
                    Pattern::kDiagonal})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown texture pattern '" + s + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "'");
}

void SceneSpec::validate() const {
  if (resolution < 16 || resolution % 16 != 0) throw ConfigError("resolution must be a positive multiple of 16");
  if (min_region < 2 || max_region < min_region) throw ConfigError("region size bounds are invalid");
  if (stripe_thickness < 1) throw ConfigError("stripe thickness must be at least 1");
  if (margin < 1) throw ConfigError("margin must be at least 1 to keep region B away from stripes");
  if (a_regions < 1 || b_regions < 1) throw ConfigError("every scene needs region A and region B instances");
  if (max_blobs < 0 || max_distractors < 0) throw ConfigError("object counts must be non-negative");
  if (max_region + stripe_thickness > resolution) throw ConfigError("regions do not fit the resolution");
  // Rough area bound: the mandatory objects with margins must fit.
  const long need = static_cast<long>(a_regions) * (min_region + margin) * (min_region + stripe_thickness + margin) +
                    static_cast<long>(b_regions) * (min_region + margin) * (min_region + margin);
  if (need > static_cast<long>(resolution) * resolution) {
    throw ConfigError("adjacency rule is infeasible: mandatory regions exceed the canvas");
  }
  if (!(source_ambiguity >= 0.0 && source_ambiguity <= 1.0)) throw ConfigError("source_ambiguity must lie in [0,1]");
  if (!(sensor_noise >= 0.0) || !(target_shift.noise_sigma >= 0.0)) throw ConfigError("noise must be non-negative");
  if (!(target_shift.merge_blend >= 0.0 && target_shift.merge_blend <= 1.0)) {
    throw ConfigError("merge_blend must lie in [0,1]");
  }
  for (const Texture& t : textures) {
    if (t.period < 1) throw ConfigError("texture period must be positive");
    if (!(t.amplitude >= 0.0) || !(t.grain >= 0.0)) throw ConfigError("texture amplitudes must be non-negative");
  }
}

SceneSpec SceneSpec::default_spec() {
  SceneSpec s;
  s.textures[kBackground] = {{0.30, 0.30, 0.30}, Pattern::kFlat, 0.0, 4, 0.04};
  s.textures[kRegionA] = {{0.80, 0.55, 0.30}, Pattern::kChecker, 0.08, 4, 0.02};
  s.textures[kRegionB] = {{0.80, 0.35, 0.55}, Pattern::kHStripes, 0.08, 4, 0.02};
  s.textures[kStripe] = {{0.90, 0.85, 0.20}, Pattern::kFlat, 0.0, 4, 0.02};
  s.textures[kBlob] = {{0.20, 0.60, 0.25}, Pattern::kDots, 0.10, 3, 0.02};
  s.textures[kDistractor] = {{0.20, 0.30, 0.80}, Pattern::kVStripes, 0.06, 2, 0.02};
  s.target_shift.tint = {0.05, -0.02, -0.05};
  s.target_shift.noise_sigma = 0.04;
  s.target_shift.merge_ab = true;
  s.target_shift.merge_blend = 0.5;
  s.source_ambiguity = 0.3;
  return s;
}

SceneSpec SceneSpec::easy_spec() {
  SceneSpec s = default_spec();
  s.target_shift.merge_ab = false;
  s.target_shift.tint = {0.02, 0.0, -0.02};
  s.target_shift.noise_sigma = 0.02;
  return s;
}

std::uint64_t sample_seed(std::uint64_t seed, Split split, std::size_t index) {
  return derive_seed(seed, "scene", split_base(split) + index);
}

Sample generate_scene(const SceneSpec& spec, Domain domain, std::uint64_t seed) {
  Rng rng(seed);
  for (int attempt = 0; attempt < kSceneAttempts; ++attempt) {
    auto layout = try_layout(spec, rng);
    if (!layout) continue;
    // Drawn in both domains to keep the streams aligned.
    const bool ambiguous = rng.bernoulli(spec.source_ambiguity);
    const int shared = ambiguous ? 1 + static_cast<int>(rng.uniform_int(2)) : 0;
    const auto tex = domain_textures(spec, domain, shared);
    Sample s;
    s.image = render(spec, domain, layout->label, layout->region, layout->regions, tex, rng);
    s.label = std::move(layout->label);
    s.domain = domain;
    s.seed = seed;
    return s;
  }
  throw ConfigError("adjacency rule is infeasible: could not place the mandatory regions");
}

Dataset generate_dataset(const SceneSpec& spec, Domain domain, std::size_t n, std::uint64_t seed, Split split) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  spec.validate();
  Dataset ds;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(generate_scene(spec, domain, sample_seed(seed, split, i)));
  seal_if_needed(ds, domain, split);
  return ds;
}

namespace {

Sample generate_cls_sample(const SceneSpec& spec, Domain domain, std::uint64_t seed) {
  Rng rng(seed);
  const int n = spec.resolution;
  const auto plane = static_cast<std::size_t>(n * n);
  const int cls = draw_int(rng, 0, kNumClsClasses - 1);
  std::vector<int> tex_class(plane, kBackground);
  std::vector<int> region(plane, 0);
  const int c = n / 2;
  const int jy = draw_int(rng, -3, 3), jx = draw_int(rng, -3, 3);
  const int cy = c + jy, cx = c + jx;
  int object_tex = kBlob;
  if (cls == kDisk) object_tex = kDistractor;
  if (cls == kCrossPlain) object_tex = kRegionA;
  if (cls == kCrossMarked) object_tex = kRegionB;
  const int scale = draw_int(rng, n / 5, n / 4 + 1);
  const int arm = std::max(2, scale / 2);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const int dy = y - cy, dx = x - cx;
      bool inside = false;
      switch (cls) {
        case kSquare: inside = std::abs(dy) <= scale && std::abs(dx) <= scale; break;
        case kDisk: inside = dy * dy + dx * dx <= (scale + 1) * (scale + 1); break;
        default:
          inside = (std::abs(dy) <= scale + 2 && std::abs(dx) <= arm / 2 + 1) ||
                   (std::abs(dx) <= scale + 2 && std::abs(dy) <= arm / 2 + 1);
          break;
      }
      if (inside) {
        tex_class[static_cast<std::size_t>(y * n + x)] = object_tex;
        region[static_cast<std::size_t>(y * n + x)] = 1;
      }
    }
  // Corner marker; drawn for every sample so the stream stays aligned.
  const int corner = draw_int(rng, 0, 3);
  if (cls == kCrossMarked) {
    const int m = 4;
    const int y0 = corner < 2 ? 1 : n - 1 - m, x0 = corner % 2 == 0 ? 1 : n - 1 - m;
    for (int y = y0; y < y0 + m; ++y)
      for (int x = x0; x < x0 + m; ++x) {
        tex_class[static_cast<std::size_t>(y * n + x)] = kStripe;
        region[static_cast<std::size_t>(y * n + x)] = 2;
      }
  }
  const auto tex = domain_textures(spec, domain);
  Sample s;
  s.image = render(spec, domain, tex_class, region, 3, tex, rng);
  s.label = {cls};
  s.domain = domain;
  s.seed = seed;
  return s;
}

}  // namespace

Dataset generate_cls_dataset(const SceneSpec& spec, Domain domain, std::size_t n, std::uint64_t seed, Split split) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  spec.validate();
  Dataset ds;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.samples.push_back(generate_cls_sample(spec, domain, derive_seed(seed, "cls", split_base(split) + i)));
  }
  seal_if_needed(ds, domain, split);
  return ds;
}

AdjacencyStats adjacency_stats(const std::vector<int>& label, std::size_t height, std::size_t width) {
  int count = 0;
  const std::vector<int> comp = pl::connected_components(label, height, width, &count);
  std::vector<int> comp_class(static_cast<std::size_t>(count), -1);
  std::vector<std::uint8_t> touches(static_cast<std::size_t>(count), 0);
  for (std::size_t i = 0; i < label.size(); ++i) {
    const auto k = static_cast<std::size_t>(comp[i]);
    comp_class[k] = label[i];
    const std::size_t y = i / width, x = i % width;
    auto stripe_at = [&](std::size_t j) { return label[j] == kStripe; };
    if ((y > 0 && stripe_at(i - width)) || (y + 1 < height && stripe_at(i + width)) ||
        (x > 0 && stripe_at(i - 1)) || (x + 1 < width && stripe_at(i + 1)))
      touches[k] = 1;
  }
  AdjacencyStats st;
  for (std::size_t k = 0; k < comp_class.size(); ++k) {
    if (comp_class[k] == kRegionA) {
      ++st.a_components;
      st.a_touching_stripe += touches[k];
    } else if (comp_class[k] == kRegionB) {
      ++st.b_components;
      st.b_touching_stripe += touches[k];
    }
  }
  return st;
}

ag::Tensor stack_images(const std::vector<const ag::Tensor*>& images) {
  if (images.empty()) throw ShapeError("stack_images: no images");
  const ag::Shape s = images.front()->shape();
  ag::Shape out{images.size()};
  out.insert(out.end(), s.begin(), s.end());
  std::vector<double> v;
  v.reserve(ag::shape_numel(out));
  for (const ag::Tensor* t : images) {
    if (t->shape() != s) throw ShapeError("stack_images: mismatched shapes");
    v.insert(v.end(), t->values().begin(), t->values().end());
  }
  return ag::Tensor(out, std::move(v));
}

}  // namespace miclab::synth
