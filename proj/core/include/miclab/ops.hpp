#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "miclab/rng.hpp"
#include "miclab/tensor.hpp"

// Differentiable operations. Every op takes the tape it records onto; ops on
// inputs that need no gradient record nothing.
namespace miclab::ag {

inline constexpr double kProbClamp = 1e-12;
inline constexpr int kIgnoreLabel = -1;

// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,k,k]. k must be odd.
Tensor conv2d(Graph& g, const Tensor& x, const Tensor& w, int stride, int padding);

// Same op with separate leading (top/left) and trailing (bottom/right) zero
// padding; conv2d(.., p) == conv2d_padded(.., p, p). The output size
// (H + pad_begin + pad_end - k) / stride + 1 must be integral.
Tensor conv2d_padded(Graph& g, const Tensor& x, const Tensor& w, int stride, int pad_begin,
                     int pad_end);

// Adds b[C] along dimension 1 of x[N,C,...].
Tensor bias_add(Graph& g, const Tensor& x, const Tensor& b);

Tensor relu(Graph& g, const Tensor& x);

// Bilinear x2 upsampling of x[N,C,H,W] with half-pixel centers and clamped
// borders (align_corners = false).
Tensor upsample_bilinear2x(Graph& g, const Tensor& x);

Tensor concat_channels(Graph& g, const Tensor& a, const Tensor& b);

// x[N,C,H,W] -> [N,C,1,1]
Tensor global_avg_pool(Graph& g, const Tensor& x);

// Max-subtracted softmax along `axis`. Throws NumericsError on non-finite input.
Tensor softmax(Graph& g, const Tensor& logits, std::size_t axis = 1);

// Per-pixel hard targets for probability maps laid out as [N,C,H,W].
// labels[n*H*W + p] is a class index or kIgnoreLabel; weights, when present,
// scale each pixel's term (the pixel still counts in the normalizer).
struct PixelTargets {
  std::vector<int> labels;
  std::vector<double> weights;
};

// Mean over counted pixels of -w * log(max(p_target, eps)), averaged over the
// batch. Images without counted pixels contribute 0 to the batch mean.
Tensor cross_entropy(Graph& g, const Tensor& probs, const PixelTargets& targets);

// Same loss with dense targets of the same shape as probs; a pixel counts when
// its target row has positive mass (all-zero rows are ignored).
Tensor cross_entropy(Graph& g, const Tensor& probs, const Tensor& target_dense);

// Mean per-pixel Shannon entropy of probs[N,C,H,W] divided by ln C.
Tensor normalized_entropy(Graph& g, const Tensor& probs);

// Mean binary cross-entropy of logits against a constant 0/1 target.
Tensor bce_with_logits(Graph& g, const Tensor& logits, double target);

// Identity forward; backward multiplies the incoming gradient by -lambda.
Tensor grad_reverse(Graph& g, const Tensor& x, double lambda);

Tensor sum(Graph& g, const Tensor& x);
Tensor mean(Graph& g, const Tensor& x);
Tensor scale(Graph& g, const Tensor& x, double c);
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);

// Gradient check by central differences:
//   max_i |analytic_i - fd_i| / (|analytic_i| + |fd_i| + 1e-8).
// f must return a scalar. When `max_coords` is set, that many coordinates are
// sampled without replacement from `rng`; otherwise every coordinate is checked.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

struct GradCheckOptions {
  std::optional<std::size_t> max_coords;
  std::uint64_t seed = 0;
};

double finite_diff_check(const ScalarFn& f, const Tensor& x, double step,
                         const GradCheckOptions& opts = {});

}  // namespace miclab::ag
