#include <cmath>
#include <limits>

#include "../support/oracles.hpp"
#include "doctest.h"
#include "miclab/errors.hpp"
#include "miclab/ops.hpp"

using namespace miclab;
using ag::Graph;
using ag::Tensor;

namespace {

Tensor conv_loops(const Tensor& x, const Tensor& w, int stride, int pad) {
  const long n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const long co = w.dim(0), k = w.dim(2);
  const long ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor out({static_cast<std::size_t>(n), static_cast<std::size_t>(co), static_cast<std::size_t>(ho),
              static_cast<std::size_t>(wo)});
  for (long b = 0; b < n; ++b)
    for (long o = 0; o < co; ++o)
      for (long y = 0; y < ho; ++y)
        for (long xx = 0; xx < wo; ++xx) {
          double acc = 0.0;
          for (long c = 0; c < ci; ++c)
            for (long ky = 0; ky < k; ++ky)
              for (long kx = 0; kx < k; ++kx) {
                const long iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                acc += x.data()[((b * ci + c) * h + iy) * wd + ix] * w.data()[((o * ci + c) * k + ky) * k + kx];
              }
          out.data()[((b * co + o) * ho + y) * wo + xx] = acc;
        }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d 1x1 identity kernel returns the input") {
  Rng rng(1);
  Tensor x = oracle::random_tensor({2, 1, 4, 4}, rng);
  Graph g(false);
  Tensor y = ag::conv2d(g, x, Tensor::filled({1, 1, 1, 1}, 1.0), 1, 0);
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d of a zero input is zero") {
  Rng rng(2);
  Graph g(false);
  Tensor y = ag::conv2d(g, Tensor({1, 2, 6, 6}), oracle::random_tensor({3, 2, 3, 3}, rng), 1, 1);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the nested-loop reference on random shapes") {
  Rng rng(3);
  Graph g(false);
  {
    Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng), w = oracle::random_tensor({3, 2, 3, 3}, rng);
    CHECK(max_abs_diff(ag::conv2d(g, x, w, 1, 0), conv_loops(x, w, 1, 0)) < 1e-12);
  }
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 1 + 2 * static_cast<int>(rng.uniform_int(2));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int pad = static_cast<int>(rng.uniform_int(2));
    std::size_t h = 3 + rng.uniform_int(6);
    // Choose a size with an integral output.
    while ((static_cast<int>(h) + 2 * pad - k) % stride != 0) ++h;
    const std::size_t n = 1 + rng.uniform_int(2), ci = 1 + rng.uniform_int(3), co = 1 + rng.uniform_int(3);
    Tensor x = oracle::random_tensor({n, ci, h, h}, rng);
    Tensor w = oracle::random_tensor({co, ci, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, rng);
    CHECK(max_abs_diff(ag::conv2d(g, x, w, stride, pad), conv_loops(x, w, stride, pad)) < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad shapes") {
  Graph g(false);
  CHECK_THROWS_AS(ag::conv2d(g, Tensor({1, 2, 5, 5}), Tensor({1, 3, 3, 3}), 1, 0), ShapeError);
  CHECK_THROWS_AS(ag::conv2d(g, Tensor({1, 1, 6, 6}), Tensor({1, 1, 3, 3}), 2, 0), ShapeError);
  CHECK_THROWS_AS(ag::conv2d(g, Tensor({1, 1, 6, 6}), Tensor({1, 1, 2, 2}), 1, 0), ShapeError);
}

TEST_CASE("softmax examples") {
  Graph g(false);
  Tensor p = ag::softmax(g, Tensor({1, 2}, {0.0, 0.0}));
  CHECK(p.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p.data()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor a = ag::softmax(g, Tensor({1, 2}, {0.3, -1.2}));
  Tensor b = ag::softmax(g, Tensor({1, 2}, {0.3 + 7.5, -1.2 + 7.5}));
  CHECK(max_abs_diff(a, b) < 1e-15);

  Tensor c = ag::softmax(g, Tensor({1, 3}, {1.0, 2.0, 3.0}));
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(c.data()[i] - static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z)) < 1e-15);
}

TEST_CASE("softmax slices sum to one for large logits") {
  Rng rng(4);
  Graph g(false);
  Tensor z({3, 5, 4, 4});
  for (double& v : z.values()) v = rng.uniform(-50.0, 50.0);
  Tensor p = ag::softmax(g, z);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t px = 0; px < 16; ++px) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) {
        const double v = p.data()[(n * 5 + c) * 16 + px];
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-10);
    }
}

TEST_CASE("softmax rejects non-finite logits") {
  Graph g(false);
  CHECK_THROWS_AS(ag::softmax(g, Tensor({1, 2}, {0.0, std::numeric_limits<double>::quiet_NaN()})), NumericsError);
  CHECK_THROWS_AS(ag::softmax(g, Tensor({1, 2}, {0.0, std::numeric_limits<double>::infinity()})), NumericsError);
}

TEST_CASE("cross_entropy examples") {
  Graph g(false);
  CHECK(ag::cross_entropy(g, Tensor({1, 2, 1, 1}, {1.0, 0.0}), Tensor({1, 2, 1, 1}, {1.0, 0.0})).item() == 0.0);
  CHECK(ag::cross_entropy(g, Tensor({1, 2, 1, 1}, {0.5, 0.5}), Tensor({1, 2, 1, 1}, {1.0, 0.0})).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));

  Rng rng(5);
  Tensor probs = oracle::random_probs(1, 3, 2, 2, rng);
  std::vector<int> labels(4);
  Tensor dense({1, 3, 2, 2});
  double expected = 0.0;
  for (std::size_t p = 0; p < 4; ++p) {
    labels[p] = static_cast<int>(rng.uniform_int(3));
    dense.data()[labels[p] * 4 + p] = 1.0;
    expected -= std::log(probs.data()[labels[p] * 4 + p]);
  }
  expected /= 4.0;
  CHECK(ag::cross_entropy(g, probs, dense).item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(ag::cross_entropy(g, probs, ag::PixelTargets{labels, {}}).item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("cross_entropy ignores all-zero target rows and clamps zero probabilities") {
  Graph g(false);
  Tensor probs({1, 2, 1, 2}, {0.25, 0.0, 0.75, 1.0});
  Tensor dense({1, 2, 1, 2}, {1.0, 0.0, 0.0, 0.0});  // second pixel ignored
  CHECK(ag::cross_entropy(g, probs, dense).item() == doctest::Approx(-std::log(0.25)));
  Tensor zero_target({1, 2, 1, 2}, {0.0, 1.0, 0.0, 0.0});
  CHECK(ag::cross_entropy(g, probs, zero_target).item() == doctest::Approx(-std::log(ag::kProbClamp)));
  CHECK_THROWS_AS(ag::cross_entropy(g, probs, Tensor({1, 2, 2, 1})), ShapeError);
}

TEST_CASE("normalized entropy is 0 for one-hot and 1 for uniform predictions") {
  Graph g(false);
  CHECK(ag::normalized_entropy(g, Tensor({1, 3, 1, 1}, {0.0, 1.0, 0.0})).item() == doctest::Approx(0.0));
  CHECK(ag::normalized_entropy(g, Tensor({1, 4, 1, 1}, {0.25, 0.25, 0.25, 0.25})).item() ==
        doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("backward of sum gives ones and accumulates across passes") {
  Rng rng(6);
  Tensor x = oracle::random_tensor({2, 3}, rng);
  x.set_requires_grad(true);
  Graph g;
  Tensor loss = ag::sum(g, x);
  g.backward(loss);
  for (double v : x.grad()) CHECK(v == 1.0);
  g.backward(loss);
  for (double v : x.grad()) CHECK(v == 2.0);
}

TEST_CASE("backward twice doubles every gradient of a nonlinear graph") {
  Rng rng(7);
  Tensor x = oracle::random_tensor({1, 2, 4, 4}, rng);
  Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Graph g;
  Tensor loss = ag::normalized_entropy(g, ag::softmax(g, ag::relu(g, ag::conv2d(g, x, w, 1, 1))));
  g.backward(loss);
  const std::vector<double> once(w.grad().begin(), w.grad().end());
  g.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("backward visits nodes in reverse insertion order") {
  Tensor x({2}, {1.0, 2.0}, true);
  Graph g;
  Tensor a = ag::scale(g, x, 3.0);
  Tensor b = ag::mul(g, a, x);
  Tensor loss = ag::sum(g, b);
  REQUIRE(g.size() == 3);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (int in : g.node(i).inputs) CHECK(in < static_cast<int>(i));
  g.backward(loss);
  // d/dx sum(3 x^2) = 6x
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(12.0));
}

TEST_CASE("backward of a non-scalar throws") {
  Tensor x({2}, {1.0, 2.0}, true);
  Graph g;
  Tensor y = ag::scale(g, x, 2.0);
  CHECK_THROWS_AS(g.backward(y), ShapeError);
}

TEST_CASE("cross-entropy of softmax has gradient softmax minus target") {
  Rng rng(8);
  Tensor z = oracle::random_tensor({1, 4, 1, 1}, rng);
  z.set_requires_grad(true);
  Tensor y({1, 4, 1, 1}, {0.0, 0.0, 1.0, 0.0});
  Graph g;
  Tensor p = ag::softmax(g, z);
  g.backward(ag::cross_entropy(g, p, y));
  for (std::size_t i = 0; i < 4; ++i) CHECK(z.grad()[i] == doctest::Approx(p.data()[i] - y.data()[i]).epsilon(1e-12));
  const double err = ag::finite_diff_check(
      [&](Graph& gg, const Tensor& t) { return ag::cross_entropy(gg, ag::softmax(gg, t), y); }, z, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("finite_diff_check examples") {
  Rng rng(9);
  Tensor x = oracle::random_tensor({3, 4}, rng);
  CHECK(ag::finite_diff_check([](Graph& g, const Tensor& t) { return ag::sum(g, ag::mul(g, t, t)); }, x, 1e-5) <
        1e-7);
  Tensor z = oracle::random_tensor({1, 5}, rng);
  // The function is constant: a wide step keeps round-off below the tolerance.
  CHECK(ag::finite_diff_check([](Graph& g, const Tensor& t) { return ag::sum(g, ag::softmax(g, t)); }, z, 0.05) <
        1e-6);
  CHECK_THROWS_AS(ag::finite_diff_check(
                      [](Graph& g, const Tensor& t) {
                        return ag::scale(g, ag::sum(g, t), std::numeric_limits<double>::infinity());
                      },
                      x, 1e-5),
                  NumericsError);
}

TEST_CASE("two-layer conv net gradient matches finite differences") {
  Rng rng(10);
  Tensor x = oracle::random_images(1, 8, 8, rng);
  Tensor w1 = oracle::random_tensor({4, 3, 3, 3}, rng, 0.5);
  Tensor w2 = oracle::random_tensor({3, 4, 3, 3}, rng, 0.5);
  Tensor b1 = oracle::random_tensor({4}, rng, 0.3);
  std::vector<int> labels(64);
  for (int& l : labels) l = static_cast<int>(rng.uniform_int(3));
  auto net = [&](Graph& g, const Tensor& k1) {
    Tensor h = ag::relu(g, ag::bias_add(g, ag::conv2d(g, x, k1, 1, 1), b1));
    return ag::cross_entropy(g, ag::softmax(g, ag::conv2d(g, h, w2, 1, 1)), ag::PixelTargets{labels, {}});
  };
  CHECK(ag::finite_diff_check(net, w1, 1e-5) < 1e-4);
}

TEST_CASE("every op passes a finite-difference check") {
  Rng rng(11);
  Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor other = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor bias = oracle::random_tensor({3}, rng);
  Tensor weights = oracle::random_tensor({2, 3, 4, 4}, rng);
  auto dot = [&](Graph& g, const Tensor& t) { return ag::sum(g, ag::mul(g, t, weights)); };
  const std::vector<std::pair<const char*, ag::ScalarFn>> cases{
      {"bias_add", [&](Graph& g, const Tensor& t) { return dot(g, ag::bias_add(g, t, bias)); }},
      {"relu", [&](Graph& g, const Tensor& t) { return dot(g, ag::relu(g, t)); }},
      {"upsample", [&](Graph& g, const Tensor& t) { return ag::mean(g, ag::mul(g, ag::upsample_bilinear2x(g, t),
                                                                               ag::upsample_bilinear2x(g, t))); }},
      {"concat", [&](Graph& g, const Tensor& t) {
         Tensor c = ag::concat_channels(g, t, other);
         return ag::mean(g, ag::mul(g, c, c));
       }},
      {"pool", [&](Graph& g, const Tensor& t) {
         Tensor p = ag::global_avg_pool(g, t);
         return ag::sum(g, ag::mul(g, p, p));
       }},
      {"softmax_entropy", [&](Graph& g, const Tensor& t) { return ag::normalized_entropy(g, ag::softmax(g, t)); }},
      {"bce", [&](Graph& g, const Tensor& t) { return ag::bce_with_logits(g, ag::global_avg_pool(g, t), 1.0); }},
      {"add_scale", [&](Graph& g, const Tensor& t) { return dot(g, ag::add(g, ag::scale(g, t, -1.5), other)); }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    CHECK(ag::finite_diff_check(f, x, 1e-5) < 1e-4);
  }
}
