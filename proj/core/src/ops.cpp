#include "miclab/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "miclab/errors.hpp"

namespace miclab::ag {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, ho, wo;
  int stride, pad;
  std::size_t rows() const { return cin * k * k; }
  std::size_t plane() const { return ho * wo; }
};

// Valid output range [lo, hi) along one axis for kernel offset `kk`.
std::pair<std::size_t, std::size_t> valid_range(std::size_t in, std::size_t out, int stride,
                                                int pad, std::size_t kk) {
  const long off = static_cast<long>(kk) - pad;
  long lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long hi = (static_cast<long>(in) - 1 - off);
  hi = hi < 0 ? 0 : hi / stride + 1;
  lo = std::min<long>(lo, static_cast<long>(out));
  hi = std::min<long>(std::max(hi, lo), static_cast<long>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols is [rows, n*plane] row-major.
void im2col(const ConvGeom& c, const double* x, double* cols) {
  const std::size_t np = c.n * c.plane();
  for (std::size_t ci = 0; ci < c.cin; ++ci) {
    for (std::size_t ki = 0; ki < c.k; ++ki) {
      const auto [oh_lo, oh_hi] = valid_range(c.h, c.ho, c.stride, c.pad, ki);
      for (std::size_t kj = 0; kj < c.k; ++kj) {
        const auto [ow_lo, ow_hi] = valid_range(c.w, c.wo, c.stride, c.pad, kj);
        double* row = cols + ((ci * c.k + ki) * c.k + kj) * np;
        std::fill(row, row + np, 0.0);
        for (std::size_t n = 0; n < c.n; ++n) {
          const double* xin = x + (n * c.cin + ci) * c.h * c.w;
          double* dst = row + n * c.plane();
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t ih = oh * c.stride + ki - c.pad;
            const double* src = xin + ih * c.w;
            double* d = dst + oh * c.wo;
            if (c.stride == 1) {
              const std::size_t shift = kj - c.pad;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) d[ow] = src[ow + shift];
            } else {
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) d[ow] = src[ow * c.stride + kj - c.pad];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeom& c, const double* cols, double* dx) {
  const std::size_t np = c.n * c.plane();
  for (std::size_t ci = 0; ci < c.cin; ++ci) {
    for (std::size_t ki = 0; ki < c.k; ++ki) {
      const auto [oh_lo, oh_hi] = valid_range(c.h, c.ho, c.stride, c.pad, ki);
      for (std::size_t kj = 0; kj < c.k; ++kj) {
        const auto [ow_lo, ow_hi] = valid_range(c.w, c.wo, c.stride, c.pad, kj);
        const double* row = cols + ((ci * c.k + ki) * c.k + kj) * np;
        for (std::size_t n = 0; n < c.n; ++n) {
          double* xin = dx + (n * c.cin + ci) * c.h * c.w;
          const double* src = row + n * c.plane();
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t ih = oh * c.stride + ki - c.pad;
            double* d = xin + ih * c.w;
            const double* s = src + oh * c.wo;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) d[ow * c.stride + kj - c.pad] += s[ow];
          }
        }
      }
    }
  }
}

struct Interp {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<Interp> upsample_taps(std::size_t in) {
  std::vector<Interp> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericsError(std::string(what) + ": non-finite input");
  }
}

}  // namespace

Tensor conv2d(Graph& g, const Tensor& x, const Tensor& w, int stride, int padding) {
  return conv2d_padded(g, x, w, stride, padding, padding);
}

Tensor conv2d_padded(Graph& g, const Tensor& x, const Tensor& w, int stride, int padding,
                     int pad_end) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) + " input channels, got " +
                     std::to_string(x.dim(1)));
  }
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + shape_str(w.shape()));
  }
  if (stride < 1 || padding < 0 || pad_end < 0) throw ShapeError("conv2d: invalid stride/padding");
  ConvGeom c{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), 0, 0, stride, padding};
  const long span_h = static_cast<long>(c.h) + padding + pad_end - static_cast<long>(c.k);
  const long span_w = static_cast<long>(c.w) + padding + pad_end - static_cast<long>(c.k);
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ShapeError("conv2d: non-integral output size for input " + shape_str(x.shape()) +
                     " kernel " + std::to_string(c.k) + " stride " + std::to_string(stride) +
                     " padding " + std::to_string(padding) + "/" + std::to_string(pad_end));
  }
  c.ho = static_cast<std::size_t>(span_h / stride + 1);
  c.wo = static_cast<std::size_t>(span_w / stride + 1);

  const std::size_t rows = c.rows();
  const std::size_t np = c.n * c.plane();
  auto cols = std::make_shared<std::vector<double>>(rows * np);
  im2col(c, x.data(), cols->data());

  Eigen::Map<const RowMat> wm(w.data(), static_cast<long>(c.cout), static_cast<long>(rows));
  Eigen::Map<const RowMat> cm(cols->data(), static_cast<long>(rows), static_cast<long>(np));
  RowMat out = wm * cm;

  Tensor y({c.n, c.cout, c.ho, c.wo});
  double* yd = y.data();
  const std::size_t plane = c.plane();
  for (std::size_t n = 0; n < c.n; ++n) {
    for (std::size_t co = 0; co < c.cout; ++co) {
      const double* src = out.data() + co * np + n * plane;
      std::copy(src, src + plane, yd + (n * c.cout + co) * plane);
    }
  }

  return g.record(OpKind::kConv2d, {x, w}, y,
                  [x, w, c, cols](std::span<const double> gout) mutable {
                    const std::size_t rows = c.rows();
                    const std::size_t plane = c.plane();
                    const std::size_t np = c.n * plane;
                    RowMat gm(static_cast<long>(c.cout), static_cast<long>(np));
                    for (std::size_t n = 0; n < c.n; ++n) {
                      for (std::size_t co = 0; co < c.cout; ++co) {
                        const double* src = gout.data() + (n * c.cout + co) * plane;
                        std::copy(src, src + plane, gm.data() + co * np + n * plane);
                      }
                    }
                    Eigen::Map<const RowMat> cm(cols->data(), static_cast<long>(rows),
                                                static_cast<long>(np));
                    if (w.requires_grad()) {
                      Eigen::Map<RowMat> dw(w.grad_buffer().data(), static_cast<long>(c.cout),
                                            static_cast<long>(rows));
                      dw.noalias() += gm * cm.transpose();
                    }
                    if (x.requires_grad()) {
                      Eigen::Map<const RowMat> wm(w.data(), static_cast<long>(c.cout),
                                                  static_cast<long>(rows));
                      RowMat dcols = wm.transpose() * gm;
                      col2im_add(c, dcols.data(), x.grad_buffer().data());
                    }
                  });
}

Tensor bias_add(Graph& g, const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("bias_add: bias " + shape_str(b.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), ch = x.dim(1), inner = x.numel() / (n * ch);
  Tensor y = x.detach();
  double* yd = y.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = yd + (i * ch + c) * inner;
      const double bc = b.values()[c];
      for (std::size_t j = 0; j < inner; ++j) p[j] += bc;
    }
  return g.record(OpKind::kBiasAdd, {x, b}, y,
                  [x, b, n, ch, inner](std::span<const double> gout) mutable {
                    accumulate_grad(x, gout);
                    if (b.requires_grad()) {
                      auto& gb = b.grad_buffer();
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t c = 0; c < ch; ++c) {
                          const double* p = gout.data() + (i * ch + c) * inner;
                          double s = 0.0;
                          for (std::size_t j = 0; j < inner; ++j) s += p[j];
                          gb[c] += s;
                        }
                    }
                  });
}

Tensor relu(Graph& g, const Tensor& x) {
  Tensor y = x.detach();
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return g.record(OpKind::kRelu, {x}, y, [x](std::span<const double> gout) mutable {
    if (!x.requires_grad()) return;
    auto& gx = x.grad_buffer();
    const auto xv = x.values();
    for (std::size_t i = 0; i < gout.size(); ++i)
      if (xv[i] > 0.0) gx[i] += gout[i];
  });
}

Tensor upsample_bilinear2x(Graph& g, const Tensor& x) {
  require_rank(x, 4, "upsample_bilinear2x");
  const std::size_t n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  const std::size_t ho = 2 * h, wo = 2 * w;
  Tensor y({n, ch, ho, wo});
  const double* xd = x.data();
  double* yd = y.data();
  for (std::size_t p = 0; p < n * ch; ++p) {
    const double* src = xd + p * h * w;
    double* dst = yd + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const Interp& a = ty[oy];
      const double* r0 = src + a.i0 * w;
      const double* r1 = src + a.i1 * w;
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Interp& b = tx[ox];
        dst[oy * wo + ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) +
                            a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
      }
    }
  }
  return g.record(OpKind::kUpsample2x, {x}, y,
                  [x, n, ch, h, w, ty, tx](std::span<const double> gout) mutable {
                    if (!x.requires_grad()) return;
                    double* gx = x.grad_buffer().data();
                    const std::size_t ho = 2 * h, wo = 2 * w;
                    for (std::size_t p = 0; p < n * ch; ++p) {
                      const double* src = gout.data() + p * ho * wo;
                      double* dst = gx + p * h * w;
                      for (std::size_t oy = 0; oy < ho; ++oy) {
                        const Interp& a = ty[oy];
                        double* r0 = dst + a.i0 * w;
                        double* r1 = dst + a.i1 * w;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                          const Interp& b = tx[ox];
                          const double v = src[oy * wo + ox];
                          r0[b.i0] += a.w0 * b.w0 * v;
                          r0[b.i1] += a.w0 * b.w1 * v;
                          r1[b.i0] += a.w1 * b.w0 * v;
                          r1[b.i1] += a.w1 * b.w1 * v;
                        }
                      }
                    }
                  });
}

Tensor concat_channels(Graph& g, const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor y({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * plane, ca * plane, y.data() + i * (ca + cb) * plane);
    std::copy_n(b.data() + i * cb * plane, cb * plane, y.data() + (i * (ca + cb) + ca) * plane);
  }
  return g.record(OpKind::kConcatChannels, {a, b}, y,
                  [a, b, n, ca, cb, plane](std::span<const double> gout) mutable {
                    for (std::size_t i = 0; i < n; ++i) {
                      const double* src = gout.data() + i * (ca + cb) * plane;
                      if (a.requires_grad()) {
                        double* d = a.grad_buffer().data() + i * ca * plane;
                        for (std::size_t j = 0; j < ca * plane; ++j) d[j] += src[j];
                      }
                      if (b.requires_grad()) {
                        double* d = b.grad_buffer().data() + i * cb * plane;
                        for (std::size_t j = 0; j < cb * plane; ++j) d[j] += src[ca * plane + j];
                      }
                    }
                  });
}

Tensor global_avg_pool(Graph& g, const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({n, ch, 1, 1});
  for (std::size_t p = 0; p < n * ch; ++p) {
    const double* s = x.data() + p * plane;
    y.values()[p] = std::accumulate(s, s + plane, 0.0) / static_cast<double>(plane);
  }
  return g.record(OpKind::kGlobalAvgPool, {x}, y,
                  [x, n, ch, plane](std::span<const double> gout) mutable {
                    if (!x.requires_grad()) return;
                    double* gx = x.grad_buffer().data();
                    for (std::size_t p = 0; p < n * ch; ++p) {
                      const double v = gout[p] / static_cast<double>(plane);
                      for (std::size_t j = 0; j < plane; ++j) gx[p * plane + j] += v;
                    }
                  });
}

Tensor softmax(Graph& g, const Tensor& logits, std::size_t axis) {
  if (axis >= logits.rank()) throw ShapeError("softmax: axis out of range");
  check_finite(logits.values(), "softmax");
  const Shape& s = logits.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t ch = s[axis];
  Tensor y(s);
  const double* xd = logits.data();
  double* yd = y.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * ch * inner + i;
      double mx = xd[base];
      for (std::size_t c = 1; c < ch; ++c) mx = std::max(mx, xd[base + c * inner]);
      double z = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        const double e = std::exp(xd[base + c * inner] - mx);
        yd[base + c * inner] = e;
        z += e;
      }
      for (std::size_t c = 0; c < ch; ++c) yd[base + c * inner] /= z;
    }
  }
  Tensor yv = y;
  return g.record(OpKind::kSoftmax, {logits}, y,
                  [logits, yv, outer, inner, ch](std::span<const double> gout) mutable {
                    if (!logits.requires_grad()) return;
                    double* gx = logits.grad_buffer().data();
                    const double* yd = yv.data();
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t base = o * ch * inner + i;
                        double dot = 0.0;
                        for (std::size_t c = 0; c < ch; ++c)
                          dot += gout[base + c * inner] * yd[base + c * inner];
                        for (std::size_t c = 0; c < ch; ++c)
                          gx[base + c * inner] += yd[base + c * inner] * (gout[base + c * inner] - dot);
                      }
                    }
                  });
}

Tensor cross_entropy(Graph& g, const Tensor& probs, const PixelTargets& targets) {
  if (probs.rank() < 2) throw ShapeError("cross_entropy: probs need a class axis");
  const std::size_t n = probs.dim(0), ch = probs.dim(1), inner = probs.numel() / (n * ch);
  if (targets.labels.size() != n * inner) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.labels.size()) +
                     " labels for probs " + shape_str(probs.shape()));
  }
  if (!targets.weights.empty() && targets.weights.size() != targets.labels.size()) {
    throw ShapeError("cross_entropy: weight map size mismatch");
  }
  std::vector<double> norm(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t counted = 0;
    for (std::size_t p = 0; p < inner; ++p) {
      const int l = targets.labels[i * inner + p];
      if (l == kIgnoreLabel) continue;
      if (l < 0 || static_cast<std::size_t>(l) >= ch) {
        throw ShapeError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                         std::to_string(ch) + ")");
      }
      ++counted;
    }
    norm[i] = counted ? 1.0 / (static_cast<double>(counted) * static_cast<double>(n)) : 0.0;
  }
  const double* pd = probs.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < inner; ++p) {
      const int l = targets.labels[i * inner + p];
      if (l == kIgnoreLabel) continue;
      const double wgt = targets.weights.empty() ? 1.0 : targets.weights[i * inner + p];
      const double pv = pd[(i * ch + static_cast<std::size_t>(l)) * inner + p];
      acc += -wgt * std::log(std::max(pv, kProbClamp));
    }
    loss += acc * norm[i];
  }
  return g.record(OpKind::kCrossEntropy, {probs}, Tensor::scalar(loss),
                  [probs, targets, norm, n, ch, inner](std::span<const double> gout) mutable {
                    if (!probs.requires_grad()) return;
                    double* gp = probs.grad_buffer().data();
                    const double* pd = probs.data();
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t p = 0; p < inner; ++p) {
                        const int l = targets.labels[i * inner + p];
                        if (l == kIgnoreLabel) continue;
                        const double wgt =
                            targets.weights.empty() ? 1.0 : targets.weights[i * inner + p];
                        const std::size_t idx = (i * ch + static_cast<std::size_t>(l)) * inner + p;
                        if (pd[idx] > kProbClamp) gp[idx] += -gout[0] * wgt * norm[i] / pd[idx];
                      }
                    }
                  });
}

Tensor cross_entropy(Graph& g, const Tensor& probs, const Tensor& target_dense) {
  require_same_shape(probs, target_dense, "cross_entropy");
  if (probs.rank() < 2) throw ShapeError("cross_entropy: probs need a class axis");
  const std::size_t n = probs.dim(0), ch = probs.dim(1), inner = probs.numel() / (n * ch);
  const double* pd = probs.data();
  const double* td = target_dense.data();
  std::vector<double> norm(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t counted = 0;
    for (std::size_t p = 0; p < inner; ++p) {
      double mass = 0.0;
      for (std::size_t c = 0; c < ch; ++c) mass += td[(i * ch + c) * inner + p];
      if (mass > 0.0) ++counted;
    }
    norm[i] = counted ? 1.0 / (static_cast<double>(counted) * static_cast<double>(n)) : 0.0;
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t idx = (i * ch + c) * inner + p;
        if (td[idx] != 0.0) acc += -td[idx] * std::log(std::max(pd[idx], kProbClamp));
      }
    loss += acc * norm[i];
  }
  return g.record(OpKind::kCrossEntropy, {probs}, Tensor::scalar(loss),
                  [probs, target_dense, norm, n, ch, inner](std::span<const double> gout) mutable {
                    if (!probs.requires_grad()) return;
                    double* gp = probs.grad_buffer().data();
                    const double* pd = probs.data();
                    const double* td = target_dense.data();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < ch * inner; ++j) {
                        const std::size_t idx = i * ch * inner + j;
                        if (td[idx] != 0.0 && pd[idx] > kProbClamp)
                          gp[idx] += -gout[0] * td[idx] * norm[i] / pd[idx];
                      }
                  });
}

Tensor normalized_entropy(Graph& g, const Tensor& probs) {
  if (probs.rank() < 2) throw ShapeError("normalized_entropy: probs need a class axis");
  const std::size_t n = probs.dim(0), ch = probs.dim(1), inner = probs.numel() / (n * ch);
  if (ch < 2) throw ShapeError("normalized_entropy: need at least two classes");
  const double k = 1.0 / (static_cast<double>(n * inner) * std::log(static_cast<double>(ch)));
  double total = 0.0;
  for (double p : probs.values()) total -= p * std::log(std::max(p, kProbClamp));
  return g.record(OpKind::kEntropy, {probs}, Tensor::scalar(total * k),
                  [probs, k](std::span<const double> gout) mutable {
                    if (!probs.requires_grad()) return;
                    auto& gp = probs.grad_buffer();
                    const auto pv = probs.values();
                    for (std::size_t i = 0; i < pv.size(); ++i) {
                      const double d = pv[i] > kProbClamp ? std::log(pv[i]) + 1.0 : std::log(kProbClamp);
                      gp[i] += -gout[0] * k * d;
                    }
                  });
}

Tensor bce_with_logits(Graph& g, const Tensor& logits, double target) {
  const auto zs = logits.values();
  const double inv = 1.0 / static_cast<double>(zs.size());
  double loss = 0.0;
  for (double z : zs) loss += std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
  return g.record(OpKind::kBceWithLogits, {logits}, Tensor::scalar(loss * inv),
                  [logits, target, inv](std::span<const double> gout) mutable {
                    if (!logits.requires_grad()) return;
                    auto& gz = logits.grad_buffer();
                    const auto zs = logits.values();
                    for (std::size_t i = 0; i < zs.size(); ++i) {
                      const double sig = 1.0 / (1.0 + std::exp(-zs[i]));
                      gz[i] += gout[0] * inv * (sig - target);
                    }
                  });
}

Tensor grad_reverse(Graph& g, const Tensor& x, double lambda) {
  return g.record(OpKind::kGradReverse, {x}, x.detach(),
                  [x, lambda](std::span<const double> gout) mutable {
                    if (!x.requires_grad()) return;
                    auto& gx = x.grad_buffer();
                    for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += -lambda * gout[i];
                  });
}

Tensor sum(Graph& g, const Tensor& x) {
  const auto v = x.values();
  return g.record(OpKind::kSum, {x}, Tensor::scalar(std::accumulate(v.begin(), v.end(), 0.0)),
                  [x](std::span<const double> gout) mutable {
                    if (!x.requires_grad()) return;
                    for (double& gx : x.grad_buffer()) gx += gout[0];
                  });
}

Tensor mean(Graph& g, const Tensor& x) {
  const auto v = x.values();
  const double inv = 1.0 / static_cast<double>(v.size());
  return g.record(OpKind::kMean, {x},
                  Tensor::scalar(std::accumulate(v.begin(), v.end(), 0.0) * inv),
                  [x, inv](std::span<const double> gout) mutable {
                    if (!x.requires_grad()) return;
                    for (double& gx : x.grad_buffer()) gx += gout[0] * inv;
                  });
}

Tensor scale(Graph& g, const Tensor& x, double c) {
  Tensor y = x.detach();
  for (double& v : y.values()) v *= c;
  return g.record(OpKind::kScale, {x}, y, [x, c](std::span<const double> gout) mutable {
    if (!x.requires_grad()) return;
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += c * gout[i];
  });
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.detach();
  const auto bv = b.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] += bv[i];
  return g.record(OpKind::kAdd, {a, b}, y, [a, b](std::span<const double> gout) mutable {
    accumulate_grad(a, gout);
    accumulate_grad(b, gout);
  });
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.detach();
  const auto bv = b.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] *= bv[i];
  return g.record(OpKind::kMul, {a, b}, y, [a, b](std::span<const double> gout) mutable {
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      const auto bv = b.values();
      for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      const auto av = a.values();
      for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * av[i];
    }
  });
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double step,
                         const GradCheckOptions& opts) {
  if (!(step > 0.0)) throw ConfigError("finite_diff_check: step must be positive");
  Tensor xa = x.detach();
  xa.set_requires_grad(true);
  Graph g;
  Tensor loss = f(g, xa);
  if (loss.numel() != 1) throw ShapeError("finite_diff_check: function must be scalar-valued");
  if (!std::isfinite(loss.item())) throw NumericsError("finite_diff_check: non-finite loss");
  g.backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (xa.has_grad()) std::copy(xa.grad().begin(), xa.grad().end(), analytic.begin());

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opts.max_coords && *opts.max_coords < coords.size()) {
    Rng rng(opts.seed);
    for (std::size_t i = 0; i < *opts.max_coords; ++i) {
      const std::size_t j = i + rng.uniform_int(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(*opts.max_coords);
  }

  auto eval_at = [&](std::size_t i, double delta) {
    Tensor xp = x.detach();
    xp.values()[i] += delta;
    Graph gp;
    const double v = f(gp, xp).item();
    if (!std::isfinite(v)) throw NumericsError("finite_diff_check: non-finite evaluation");
    return v;
  };

  double worst = 0.0;
  for (std::size_t i : coords) {
    const double fd = (eval_at(i, step) - eval_at(i, -step)) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / (std::abs(analytic[i]) + std::abs(fd) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace miclab::ag
