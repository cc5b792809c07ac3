#include <cmath>

#include "../support/oracles.hpp"
#include "doctest.h"
#include "miclab/errors.hpp"
#include "miclab/uda.hpp"

using namespace miclab;
using ag::Graph;
using ag::Tensor;

namespace {

nn::ModelParams scalar_model(double v) {
  nn::ModelParams p(nn::ArchDescriptor{});
  p.add("w", Tensor({1}, std::vector<double>{v}));
  return p;
}

std::vector<pl::PseudoLabel> uniform_labels(std::size_t n, std::size_t h, std::size_t w, double q) {
  std::vector<pl::PseudoLabel> out(n);
  Rng rng(99);
  for (auto& l : out) {
    l.height = h;
    l.width = w;
    l.num_classes = 6;
    l.quality = q;
    l.labels.resize(h * w);
    for (int& v : l.labels) v = static_cast<int>(rng.uniform_int(6));
  }
  return out;
}

struct TinyData {
  synth::Dataset src, tgt, val;
  uda::TrainData view() const { return {&src, &tgt, &val, nullptr}; }
};

TinyData tiny_data() {
  const auto spec = synth::SceneSpec::default_spec();
  return {synth::generate_dataset(spec, synth::Domain::kSource, 8, 1),
          synth::generate_dataset(spec, synth::Domain::kTarget, 8, 2),
          synth::generate_dataset(spec, synth::Domain::kTarget, 4, 2, synth::Split::kVal)};
}

uda::TrainConfig tiny_config() {
  uda::TrainConfig c;
  c.arch.encoder_widths = {4, 4, 8, 8};
  c.arch.decoder_widths = {4, 4, 4};
  c.mic.enabled = true;
  c.steps = 6;
  c.warmup_steps = 2;
  c.batch_size = 2;
  c.eval_interval = 3;
  return c;
}

}  // namespace

TEST_CASE("EMA examples") {
  {
    uda::EmaTeacher t(scalar_model(1.0), 0.0);
    uda::ema_update(t, scalar_model(0.3));
    CHECK(t.params().at(0).second.data()[0] == 0.3);
    CHECK(t.step() == 1);
  }
  {
    uda::EmaTeacher t(scalar_model(1.0), 0.999);
    uda::ema_update(t, scalar_model(0.0));
    CHECK(t.params().at(0).second.data()[0] == doctest::Approx(0.999).epsilon(1e-15));
  }
  CHECK_THROWS_AS(uda::EmaTeacher(scalar_model(1.0), 1.0), ConfigError);
  CHECK_THROWS_AS(uda::EmaTeacher(scalar_model(1.0), -0.1), ConfigError);
}

TEST_CASE("EMA teacher starts as an independent copy and decays geometrically") {
  Rng rng(0);
  auto student = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  uda::EmaTeacher t(student, 0.9);
  CHECK_FALSE(t.params().at(0).second.shares_storage(student.at(0).second));
  // Move the student away, then hold it constant.
  auto theta = student.clone();
  for (auto& [n, p] : theta)
    for (double& v : p.values()) v += 1.0;
  const auto phi0 = t.params().clone();
  for (int k = 1; k <= 200; ++k) {
    uda::ema_update(t, theta);
    const double decay = std::pow(0.9, k);
    double worst = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i)
      for (std::size_t j = 0; j < theta.at(i).second.numel(); ++j) {
        const double th = theta.at(i).second.data()[j];
        const double expect = decay * (phi0.at(i).second.data()[j] - th);
        worst = std::max(worst, std::abs(t.params().at(i).second.data()[j] - th - expect));
      }
    CHECK(worst < 1e-10);
  }
  nn::ModelParams wrong(nn::ArchDescriptor{});
  wrong.add("w", Tensor({1}));
  CHECK_THROWS_AS(uda::ema_update(t, wrong), ShapeError);
}

TEST_CASE("source loss examples") {
  Rng rng(1);
  auto model = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  const Tensor x = oracle::random_images(2, 32, 32, rng);
  std::vector<int> y(2 * 32 * 32);
  for (int& v : y) v = static_cast<int>(rng.uniform_int(6));
  Graph g(false);
  const double loss = uda::source_loss(g, model, x, y).item();
  CHECK(loss == doctest::Approx(std::log(6.0)).epsilon(0.2));
  CHECK(loss == doctest::Approx(oracle::cross_entropy(nn::predict_probs(model, x), y, {})).epsilon(1e-12));
  CHECK_THROWS_AS(uda::source_loss(g, model, Tensor({0, 3, 32, 32}), std::vector<int>{}), ConfigError);
}

TEST_CASE("mic loss with zero quality is zero and has zero gradient") {
  Rng rng(2);
  auto model = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  model.set_requires_grad(true);
  const Tensor x = oracle::random_images(2, 32, 32, rng);
  uda::MicConfig cfg;
  cfg.enabled = true;
  Rng mask(3), augr(4);
  Graph g;
  Tensor loss = uda::mic_loss(g, model, x, uniform_labels(2, 32, 32, 0.0), cfg, aug::AugParams{}, mask, augr);
  CHECK(loss.item() == 0.0);
  g.backward(loss);
  for (const auto& [n, p] : model)
    for (double v : p.grad()) CHECK(v == 0.0);
}

TEST_CASE("uniform teacher gives quality zero and a zero mic loss") {
  nn::ArchDescriptor d;
  Rng rng(5);
  auto student = nn::build_segmenter(d, rng);
  auto teacher = student.clone();
  // Zero head weights and bias -> uniform teacher probabilities.
  for (auto& [n, p] : teacher)
    if (n.rfind("head", 0) == 0)
      for (double& v : p.values()) v = 0.0;
  uda::MicConfig cfg;
  cfg.enabled = true;
  Rng mask(0), augr(0);
  Graph g(false);
  CHECK(uda::mic_loss(g, student, teacher, oracle::random_images(1, 32, 32, rng), cfg, aug::AugParams{}, mask, augr)
            .item() == 0.0);
}

TEST_CASE("mic loss without masking or augmentation is plain self-distillation") {
  Rng rng(6);
  auto model = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  const Tensor x = oracle::random_images(2, 32, 32, rng);
  const auto labels = uniform_labels(2, 32, 32, 0.6);
  uda::MicConfig cfg;
  cfg.enabled = true;
  cfg.mask_ratio = 0.0;
  cfg.use_color_aug = false;
  Rng mask(0), augr(0);
  Graph g(false);
  const double got = uda::mic_loss(g, model, x, labels, cfg, aug::AugParams{}, mask, augr).item();
  std::vector<int> y;
  for (const auto& l : labels) y.insert(y.end(), l.labels.begin(), l.labels.end());
  CHECK(got == doctest::Approx(0.6 * oracle::cross_entropy(nn::predict_probs(model, x), y, {})).epsilon(1e-12));
}

TEST_CASE("mic loss matches the step-by-step oracle on an 8x8 toy") {
  nn::ArchDescriptor d;
  d.num_classes = 2;
  d.encoder_widths = {4, 4, 4};
  d.decoder_widths = {4, 4};
  Rng rng(7);
  auto model = nn::build_segmenter(d, rng);
  for (auto& [n, p] : model)
    for (double& v : p.values()) v += 0.1 * rng.normal();
  const Tensor x = oracle::random_images(1, 8, 8, rng);
  // Hand-built teacher probabilities: class 1 on the left half, confident
  // on 40 of 64 pixels.
  Tensor probs({2, 8, 8});
  for (std::size_t p = 0; p < 64; ++p) {
    const bool left = p % 8 < 4;
    const double conf = p < 40 ? 0.99 : 0.7;
    probs.data()[64 + p] = left ? conf : 1.0 - conf;
    probs.data()[p] = 1.0 - probs.data()[64 + p];
  }
  const auto label = pl::make_seg_pseudo_label(probs, 0.968);
  CHECK(label.quality == doctest::Approx(40.0 / 64.0));
  for (auto region : {uda::LossRegion::kAll, uda::LossRegion::kMasked, uda::LossRegion::kUnmasked}) {
    uda::MicConfig cfg;
    cfg.enabled = true;
    cfg.patch_size = 4;
    cfg.mask_ratio = 0.5;
    cfg.loss_region = region;
    Rng m1(11), a1(12);
    Graph g(false);
    const double got = uda::mic_loss(g, model, x, {label}, cfg, aug::AugParams{}, m1, a1).item();
    CHECK(got == doctest::Approx(oracle::mic_loss(model, x, {label}, cfg, aug::AugParams{}, Rng(11), Rng(12)))
                     .epsilon(1e-12));
  }
}

TEST_CASE("mic loss regions partition the full loss") {
  Rng rng(8);
  auto model = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  const Tensor x = oracle::random_images(1, 32, 32, rng);
  const auto labels = uniform_labels(1, 32, 32, 0.8);
  auto run = [&](uda::LossRegion r, std::size_t* masked) {
    uda::MicConfig cfg;
    cfg.enabled = true;
    cfg.mask_ratio = 0.5;
    cfg.loss_region = r;
    Rng m(21), a(22);
    const auto batch = uda::build_masked_batch(x, labels, cfg, false, aug::AugParams{}, m, a);
    if (masked) *masked = batch.masks[0].masked_pixels();
    Rng m2(21), a2(22);
    Graph g(false);
    return uda::mic_loss(g, model, x, labels, cfg, aug::AugParams{}, m2, a2).item();
  };
  std::size_t nm = 0;
  const double all = run(uda::LossRegion::kAll, &nm);
  const double lm = run(uda::LossRegion::kMasked, nullptr);
  const double lu = run(uda::LossRegion::kUnmasked, nullptr);
  REQUIRE(nm > 0);
  REQUIRE(nm < 1024);
  CHECK(std::abs(nm * lm + (1024 - nm) * lu - 1024 * all) < 1e-9);
}

TEST_CASE("entropy loss matches a direct evaluation") {
  Rng rng(9);
  auto model = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  const Tensor x = oracle::random_images(2, 16, 16, rng);
  Graph g(false);
  const double got = uda::entropy_loss(g, model, x).item();
  CHECK(got == doctest::Approx(oracle::entropy_loss(model, x)).epsilon(1e-12));
  CHECK((got >= 0.0 && got <= 1.0));
}

TEST_CASE("adversarial losses") {
  Rng rng(10);
  auto student = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  student.set_requires_grad(true);
  auto disc = nn::build_discriminator(6, 16, 1.0, rng);
  const Tensor x = oracle::random_images(2, 32, 32, rng);
  {
    Graph g(false);
    const auto l = uda::adversarial_losses(g, student, disc, x, x);
    CHECK(l.disc_side.item() == doctest::Approx(std::log(2.0)).epsilon(0.1));
  }
  {
    disc.grl_lambda = 0.0;
    Graph g;
    const auto l = uda::adversarial_losses(g, student, disc, x, oracle::random_images(2, 32, 32, rng));
    g.backward(l.disc_side);
    for (const auto& [n, p] : student)
      for (double v : p.grad()) CHECK(v == 0.0);
  }
}

TEST_CASE("adversarial losses match a forward-pass oracle with a frozen discriminator") {
  Rng rng(11);
  auto student = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  auto disc = nn::build_discriminator(6, 8, 1.0, rng);
  const Tensor xs = oracle::random_images(2, 32, 32, rng), xt = oracle::random_images(2, 32, 32, rng);
  auto logits = [&](const Tensor& x) {
    Graph g(false);
    return nn::discriminator_forward(g, disc, nn::predict_probs(student, x), false);
  };
  auto bce = [](const Tensor& z, double target) {
    double s = 0.0;
    for (double v : z.values()) s += std::max(v, 0.0) - v * target + std::log1p(std::exp(-std::abs(v)));
    return s / static_cast<double>(z.numel());
  };
  Graph g(false);
  const auto l = uda::adversarial_losses(g, student, disc, xs, xt);
  CHECK(l.seg_side.item() == doctest::Approx(bce(logits(xt), 1.0)).epsilon(1e-12));
  CHECK(l.disc_side.item() == doctest::Approx(0.5 * (bce(logits(xs), 1.0) + bce(logits(xt), 0.0))).epsilon(1e-12));
}

TEST_CASE("self-training loss matches the paste-and-weight oracle") {
  nn::ArchDescriptor d;
  d.encoder_widths = {4, 4, 4};
  d.decoder_widths = {4, 4};
  Rng rng(12);
  auto model = nn::build_segmenter(d, rng);
  const Tensor xs = oracle::random_images(2, 8, 8, rng), xt = oracle::random_images(2, 8, 8, rng);
  std::vector<int> ys(128);
  for (int& v : ys) v = static_cast<int>(rng.uniform_int(4));
  const auto labels = uniform_labels(2, 8, 8, 0.35);
  for (bool color : {false, true}) {
    Rng mix(31), augr(32);
    Graph g(false);
    const double got =
        uda::self_training_loss(g, model, xs, ys, xt, labels, color, aug::AugParams{}, mix, augr).item();
    CHECK(got == doctest::Approx(oracle::self_training_loss(model, xs, ys, xt, labels, color, aug::AugParams{},
                                                            Rng(31), Rng(32)))
                     .epsilon(1e-12));
  }
}

TEST_CASE("self-training with zero quality and a single source class is source cross-entropy") {
  Rng rng(13);
  auto model = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  const Tensor xs = oracle::random_images(1, 16, 16, rng), xt = oracle::random_images(1, 16, 16, rng);
  const std::vector<int> ys(256, 3);
  Rng mix(0), augr(0);
  Graph g(false);
  const double got =
      uda::self_training_loss(g, model, xs, ys, xt, uniform_labels(1, 16, 16, 0.0), false, aug::AugParams{}, mix, augr)
          .item();
  Graph g2(false);
  CHECK(got == doctest::Approx(uda::source_loss(g2, model, xs, ys).item()).epsilon(1e-12));
}

TEST_CASE("total objective composition") {
  Graph g(false);
  const Tensor a = Tensor::scalar(0.5), b = Tensor::scalar(0.25), c = Tensor::scalar(2.0), d = Tensor::scalar(0.125);
  CHECK(uda::total_objective(g, {a, {}, {}, {}}, {0.0, 0.0}).item() == 0.5);
  CHECK(uda::total_objective(g, {a, b, c, {}}, {0.0, 0.0}).item() == 0.5);
  CHECK(uda::total_objective(g, {a, b, c, {}}, {1.0, 0.0}).item() == 0.75);
  CHECK(uda::total_objective(g, {a, b, c, {}}, {1.0, 1.0}).item() == 2.75);
  CHECK(uda::total_objective(g, {a, b, c, d}, {1.0, 2.0}).item() == 0.5 + 0.25 + 2.0 * (2.0 + 0.125));
  // Doubling the MIC weight doubles its contribution.
  const double base = uda::total_objective(g, {a, b, {}, {}}, {1.0, 0.0}).item();
  const double one = uda::total_objective(g, {a, b, c, {}}, {1.0, 1.5}).item() - base;
  const double two = uda::total_objective(g, {a, b, c, {}}, {1.0, 3.0}).item() - base;
  CHECK(two == 2.0 * one);
  // Standalone mode: source and MIC only.
  CHECK(uda::total_objective(g, {a, {}, c, {}}, {1.0, 1.0}).item() == 2.5);
  CHECK_THROWS_AS(uda::total_objective(g, {}, {1.0, 1.0}), ConfigError);
  CHECK_THROWS_AS((uda::LossWeights{-1.0, 1.0}.validate()), ConfigError);
}

TEST_CASE("teacher never receives gradients") {
  const auto data = tiny_data();
  auto cfg = tiny_config();
  auto state = uda::init_state(cfg);
  uda::run_steps(state, cfg, data.view(), 4, [](const uda::TrainState& s) {
    for (const auto& [n, p] : s.teacher.params()) {
      CHECK_FALSE(p.requires_grad());
      for (double v : p.grad()) CHECK(v == 0.0);
    }
  });
}

TEST_CASE("training with zero steps returns the initial state") {
  const auto data = tiny_data();
  auto cfg = tiny_config();
  cfg.steps = 0;
  cfg.warmup_steps = 0;
  const auto s = uda::train(cfg, data.view());
  CHECK(s.step == 0);
  CHECK(s.history.empty());
  const auto init = uda::init_state(cfg);
  for (std::size_t i = 0; i < s.student.size(); ++i) {
    const auto a = s.student.at(i).second.values(), b = init.student.at(i).second.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("training is deterministic and resumable") {
  const auto data = tiny_data();
  const auto cfg = tiny_config();
  const auto a = uda::train(cfg, data.view());
  const auto b = uda::train(cfg, data.view());
  CHECK(a.history == b.history);
  CHECK_FALSE(a.history.empty());
  auto split = uda::init_state(cfg);
  uda::run_steps(split, cfg, data.view(), 3);
  uda::run_steps(split, cfg, data.view(), cfg.steps);
  CHECK(split.history == a.history);
}

TEST_CASE("invalid training configs are rejected") {
  auto cfg = tiny_config();
  cfg.mic.mask_source = false;
  cfg.mic.mask_target = false;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.mic.mask_ratio = 2.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
