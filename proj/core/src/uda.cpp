#include "miclab/uda.hpp"

#include <cmath>

#include "miclab/errors.hpp"
#include "miclab/evaluation.hpp"
#include "miclab/ops.hpp"

namespace miclab::uda {
namespace {

bool is_classifier(const nn::ModelParams& m) { return m.descriptor().kind == nn::ModelKind::kClassifier; }

std::size_t plane_of(const ag::Tensor& x) { return x.dim(2) * x.dim(3); }

void check_batch(const ag::Tensor& x, const char* what) {
  if (x.rank() != 4) throw ShapeError(std::string(what) + ": images must be [N,C,H,W], got " + ag::shape_str(x.shape()));
  if (x.dim(0) == 0) throw ConfigError(std::string(what) + ": empty batch");
}

ag::Tensor slice_image(const ag::Tensor& x, std::size_t i) {
  const std::size_t per = x.numel() / x.dim(0);
  const auto v = x.values();
  return ag::Tensor({x.dim(1), x.dim(2), x.dim(3)},
                    std::vector<double>(v.begin() + static_cast<long>(i * per), v.begin() + static_cast<long>((i + 1) * per)));
}

ag::Tensor stack(std::vector<ag::Tensor>& images) {
  std::vector<const ag::Tensor*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& t : images) ptrs.push_back(&t);
  return synth::stack_images(ptrs);
}

ag::Tensor student_ce(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& input,
                      const ag::PixelTargets& targets) {
  const ag::Tensor probs = ag::softmax(g, nn::forward(g, student, input), 1);
  return ag::cross_entropy(g, probs, targets);
}

void require_finite(double v, int step, const char* what) {
  if (!std::isfinite(v)) {
    throw NumericsError(std::string("non-finite ") + what + " loss at step " + std::to_string(step));
  }
}

}  // namespace

std::string to_string(HostMethod m) {
  switch (m) {
    case HostMethod::kSourceOnly: return "source_only";
    case HostMethod::kEntropyMin: return "entropy_min";
    case HostMethod::kAdversarial: return "adversarial";
    case HostMethod::kSelfTraining: return "self_training";
    case HostMethod::kSupervisedTarget: return "supervised_target";
  }
  return "source_only";
}

HostMethod host_method_from_string(const std::string& s) {
  for (HostMethod m : {HostMethod::kSourceOnly, HostMethod::kEntropyMin, HostMethod::kAdversarial,
                       HostMethod::kSelfTraining, HostMethod::kSupervisedTarget})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown host method '" + s + "'");
}

std::string to_string(LossRegion r) {
  switch (r) {
    case LossRegion::kMasked: return "masked";
    case LossRegion::kUnmasked: return "unmasked";
    case LossRegion::kAll: return "all";
  }
  return "all";
}

LossRegion loss_region_from_string(const std::string& s) {
  if (s == "masked") return LossRegion::kMasked;
  if (s == "unmasked") return LossRegion::kUnmasked;
  if (s == "all") return LossRegion::kAll;
  throw ConfigError("unknown loss region '" + s + "'");
}

void LossWeights::validate() const {
  if (!(target >= 0.0) || !(mic >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

void MicConfig::validate() const {
  if (patch_size <= 0) throw ConfigError("mic.patch_size must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mic.mask_ratio must lie in [0,1]");
  if (!(ema_alpha >= 0.0 && ema_alpha < 1.0)) throw ConfigError("mic.ema_alpha must lie in [0,1)");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("mic.tau must lie in (0,1)");
  if (enabled && !mask_source && !mask_target) throw ConfigError("mic.mask_domains must not be empty");
}

void HostConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("host.tau must lie in (0,1)");
  if (!(pl_noise >= 0.0 && pl_noise <= 1.0)) throw ConfigError("host.pl_noise must lie in [0,1]");
  if (disc_width <= 0) throw ConfigError("host.disc_width must be positive");
  if (!(grl_lambda >= 0.0)) throw ConfigError("host.grl_lambda must be non-negative");
  if (!(disc_lr > 0.0)) throw ConfigError("host.disc_lr must be positive");
}

EmaTeacher::EmaTeacher(const nn::ModelParams& student, double alpha) : params_(student.clone()), alpha_(alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("EMA momentum must lie in [0,1)");
  params_.set_requires_grad(false);
}

void EmaTeacher::update(const nn::ModelParams& student) {
  if (!params_.same_layout(student)) throw ShapeError("teacher and student architectures differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto phi = params_.at(i).second.values();
    const auto theta = student.at(i).second.values();
    for (std::size_t j = 0; j < phi.size(); ++j) phi[j] = alpha_ * phi[j] + (1.0 - alpha_) * theta[j];
  }
  ++step_;
}

void ema_update(EmaTeacher& teacher, const nn::ModelParams& student) { teacher.update(student); }

ag::Tensor source_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x, std::span<const int> y) {
  check_batch(x, "source_loss");
  const std::size_t expect = is_classifier(student) ? x.dim(0) : x.dim(0) * plane_of(x);
  if (y.size() != expect) throw ShapeError("source_loss: label count does not match the batch");
  return student_ce(g, student, x, ag::PixelTargets{{y.begin(), y.end()}, {}});
}

std::vector<pl::PseudoLabel> teacher_pseudo_labels(const nn::ModelParams& teacher, const ag::Tensor& x, double tau) {
  check_batch(x, "teacher_pseudo_labels");
  const ag::Tensor probs = nn::predict_probs(teacher, x);
  const std::size_t n = probs.dim(0);
  std::vector<pl::PseudoLabel> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ag::Tensor p = slice_image(probs, i);
    out.push_back(is_classifier(teacher) ? pl::make_cls_pseudo_label(p) : pl::make_seg_pseudo_label(p, tau));
  }
  return out;
}

MaskedBatch build_masked_batch(const ag::Tensor& x, const std::vector<pl::PseudoLabel>& labels, const MicConfig& cfg,
                               bool classifier, const aug::AugParams& aug_params, Rng& mask_rng, Rng& aug_rng) {
  check_batch(x, "mic");
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), plane = h * w;
  if (labels.size() != n) throw ShapeError("mic: one pseudo-label per image required");
  if (classifier && cfg.loss_region != LossRegion::kAll) {
    throw UnsupportedError("classifiers support only loss_region = all");
  }
  MaskedBatch b;
  std::vector<ag::Tensor> inputs;
  inputs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ag::Tensor img = slice_image(x, i);
    if (cfg.use_color_aug) img = aug::color_augment(img, aug_params, aug_rng);
    aug::PatchMask m = aug::sample_patch_mask(h, w, cfg.patch_size, cfg.mask_ratio, mask_rng);
    inputs.push_back(aug::apply_mask(m, img));
    const pl::PseudoLabel& p = labels[i];
    const double q = cfg.use_quality_weight ? p.quality : 1.0;
    if (classifier) {
      b.targets.labels.push_back(p.labels.at(0));
      b.targets.weights.push_back(q);
    } else {
      if (p.labels.size() != plane) throw ShapeError("mic: pseudo-label resolution mismatch");
      for (std::size_t k = 0; k < plane; ++k) {
        const bool kept = m.keep[k] != 0;
        const bool in_region = cfg.loss_region == LossRegion::kAll ||
                               (cfg.loss_region == LossRegion::kMasked ? !kept : kept);
        b.targets.labels.push_back(in_region ? p.labels[k] : ag::kIgnoreLabel);
        b.targets.weights.push_back(q);
      }
    }
    b.masks.push_back(std::move(m));
  }
  b.input = stack(inputs);
  return b;
}

ag::Tensor mic_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_t,
                    const std::vector<pl::PseudoLabel>& teacher_labels, const MicConfig& cfg,
                    const aug::AugParams& aug_params, Rng& mask_rng, Rng& aug_rng) {
  cfg.validate();
  const MaskedBatch b =
      build_masked_batch(x_t, teacher_labels, cfg, is_classifier(student), aug_params, mask_rng, aug_rng);
  return student_ce(g, student, b.input, b.targets);
}

ag::Tensor mic_loss(ag::Graph& g, const nn::ModelParams& student, const nn::ModelParams& teacher,
                    const ag::Tensor& x_t, const MicConfig& cfg, const aug::AugParams& aug_params, Rng& mask_rng,
                    Rng& aug_rng) {
  return mic_loss(g, student, x_t, teacher_pseudo_labels(teacher, x_t, cfg.tau), cfg, aug_params, mask_rng, aug_rng);
}

ag::Tensor mic_source_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_s,
                           std::span<const int> y_s, const MicConfig& cfg, const aug::AugParams& aug_params,
                           Rng& mask_rng, Rng& aug_rng) {
  check_batch(x_s, "mic_source_loss");
  const bool cls = is_classifier(student);
  const std::size_t n = x_s.dim(0), per = cls ? 1 : plane_of(x_s);
  if (y_s.size() != n * per) throw ShapeError("mic_source_loss: label count does not match the batch");
  std::vector<pl::PseudoLabel> gt(n);
  for (std::size_t i = 0; i < n; ++i) {
    gt[i].labels.assign(y_s.begin() + static_cast<long>(i * per), y_s.begin() + static_cast<long>((i + 1) * per));
    gt[i].num_classes = student.descriptor().num_classes;
    gt[i].height = cls ? 1 : x_s.dim(2);
    gt[i].width = cls ? 1 : x_s.dim(3);
    gt[i].quality = 1.0;
    gt[i].classification = cls;
  }
  MicConfig c = cfg;
  c.use_quality_weight = true;
  return mic_loss(g, student, x_s, gt, c, aug_params, mask_rng, aug_rng);
}

ag::Tensor entropy_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_t) {
  check_batch(x_t, "entropy_loss");
  return ag::normalized_entropy(g, ag::softmax(g, nn::forward(g, student, x_t), 1));
}

AdversarialLosses adversarial_losses(ag::Graph& g, const nn::ModelParams& student,
                                     const nn::DiscriminatorParams& disc, const ag::Tensor& x_s,
                                     const ag::Tensor& x_t) {
  check_batch(x_s, "adversarial_losses");
  check_batch(x_t, "adversarial_losses");
  const ag::Tensor ps = ag::softmax(g, nn::forward(g, student, x_s), 1);
  const ag::Tensor pt = ag::softmax(g, nn::forward(g, student, x_t), 1);
  const ag::Tensor ls = ag::bce_with_logits(g, nn::discriminator_forward(g, disc, ps, true), 1.0);
  const ag::Tensor lt = ag::bce_with_logits(g, nn::discriminator_forward(g, disc, pt, true), 0.0);
  AdversarialLosses out;
  out.disc_side = ag::scale(g, ag::add(g, ls, lt), 0.5);
  ag::Graph detached(false);
  out.seg_side =
      ag::bce_with_logits(detached, nn::discriminator_forward(detached, disc, pt.detach(), false), 1.0);
  return out;
}

MixedBatch build_mixed_batch(const ag::Tensor& x_s, std::span<const int> y_s, const ag::Tensor& x_t,
                             const std::vector<pl::PseudoLabel>& teacher_labels, bool color_aug,
                             const aug::AugParams& aug_params, Rng& mix_rng, Rng& aug_rng) {
  check_batch(x_s, "self_training_loss");
  check_batch(x_t, "self_training_loss");
  if (x_s.shape() != x_t.shape()) throw ShapeError("self_training_loss: source and target batches differ in shape");
  const std::size_t n = x_s.dim(0), plane = plane_of(x_s);
  if (y_s.size() != n * plane || teacher_labels.size() != n) {
    throw ShapeError("self_training_loss: label count does not match the batch");
  }
  MixedBatch b;
  std::vector<ag::Tensor> inputs;
  for (std::size_t i = 0; i < n; ++i) {
    aug::MixedSample m = aug::class_mix(slice_image(x_s, i), y_s.subspan(i * plane, plane), slice_image(x_t, i),
                                        teacher_labels[i], mix_rng);
    inputs.push_back(color_aug ? aug::color_augment(m.image, aug_params, aug_rng) : m.image);
    b.targets.labels.insert(b.targets.labels.end(), m.label.begin(), m.label.end());
    b.targets.weights.insert(b.targets.weights.end(), m.weight.begin(), m.weight.end());
    b.pasted_classes.push_back(std::move(m.pasted_classes));
  }
  b.input = stack(inputs);
  return b;
}

ag::Tensor self_training_loss(ag::Graph& g, const nn::ModelParams& student, const ag::Tensor& x_s,
                              std::span<const int> y_s, const ag::Tensor& x_t,
                              const std::vector<pl::PseudoLabel>& teacher_labels, bool color_aug,
                              const aug::AugParams& aug_params, Rng& mix_rng, Rng& aug_rng) {
  if (is_classifier(student)) {
    check_batch(x_t, "self_training_loss");
    if (teacher_labels.size() != x_t.dim(0)) throw ShapeError("self_training_loss: one pseudo-label per image");
    std::vector<ag::Tensor> inputs;
    ag::PixelTargets t;
    for (std::size_t i = 0; i < x_t.dim(0); ++i) {
      ag::Tensor img = slice_image(x_t, i);
      inputs.push_back(color_aug ? aug::color_augment(img, aug_params, aug_rng) : img);
      t.labels.push_back(teacher_labels[i].labels.at(0));
      t.weights.push_back(teacher_labels[i].quality);
    }
    return student_ce(g, student, stack(inputs), t);
  }
  const MixedBatch b = build_mixed_batch(x_s, y_s, x_t, teacher_labels, color_aug, aug_params, mix_rng, aug_rng);
  return student_ce(g, student, b.input, b.targets);
}

ag::Tensor total_objective(ag::Graph& g, const LossTerms& terms, const LossWeights& w) {
  w.validate();
  ag::Tensor total;
  auto accumulate = [&](const ag::Tensor& t, double weight) {
    if (!t.defined()) return;
    const ag::Tensor term = weight == 1.0 ? t : ag::scale(g, t, weight);
    total = total.defined() ? ag::add(g, total, term) : term;
  };
  accumulate(terms.source, 1.0);
  accumulate(terms.target, w.target);
  accumulate(terms.mic, w.mic);
  accumulate(terms.mic_source, w.mic);
  if (!total.defined()) throw ConfigError("objective has no enabled loss term");
  return total;
}

void TrainConfig::validate() const {
  mic.validate();
  weights.validate();
  host_cfg.validate();
  arch.validate();
  if (steps < 0) throw ConfigError("train.steps must be non-negative");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be non-negative");
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (eval_interval <= 0) throw ConfigError("train.eval_interval must be positive");
  if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer.momentum must lie in [0,1)");
  if (host == HostMethod::kAdversarial && arch.kind != nn::ModelKind::kSegmenter) {
    throw UnsupportedError("the adversarial host needs a segmenter");
  }
}

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  Rng init(derive_seed(cfg.seed, "init"));
  s.student = nn::build_model(cfg.arch, init);
  s.teacher = EmaTeacher(s.student, cfg.mic.ema_alpha);
  s.optimizer = nn::SgdMomentum(s.student, cfg.lr, cfg.momentum);
  if (cfg.host == HostMethod::kAdversarial) {
    Rng disc_init(derive_seed(cfg.seed, "init", 1));
    s.disc = nn::build_discriminator(cfg.arch.num_classes, cfg.host_cfg.disc_width, cfg.host_cfg.grl_lambda, disc_init);
    s.disc_optimizer = nn::SgdMomentum(s.disc->params, cfg.host_cfg.disc_lr, cfg.momentum);
  }
  s.rng.data = Rng(derive_seed(cfg.seed, "data"));
  s.rng.mask = Rng(derive_seed(cfg.seed, "mask"));
  s.rng.aug = Rng(derive_seed(cfg.seed, "aug"));
  s.rng.mix = Rng(derive_seed(cfg.seed, "mix"));
  s.rng.noise = Rng(derive_seed(cfg.seed, "noise"));
  return s;
}

ag::Tensor gather_images(const synth::Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<const ag::Tensor*> ptrs;
  ptrs.reserve(idx.size());
  for (std::size_t i : idx) ptrs.push_back(&ds.samples.at(i).image);
  return synth::stack_images(ptrs);
}

std::vector<int> gather_labels(const std::vector<std::vector<int>>& labels, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (std::size_t i : idx) out.insert(out.end(), labels.at(i).begin(), labels.at(i).end());
  return out;
}

std::vector<int> gather_labels(const synth::Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (std::size_t i : idx) {
    const auto& l = ds.samples.at(i).label;
    if (l.empty()) throw ConfigError("dataset sample has no labels (sealed split?)");
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

namespace {

void eval_split(const nn::ModelParams& model, const synth::Dataset& ds, const std::string& split, int step,
                std::vector<MetricPoint>& out) {
  std::vector<const ag::Tensor*> images;
  std::vector<std::vector<int>> gts;
  for (const auto& s : ds.samples) {
    if (s.label.empty()) throw ConfigError("evaluation split '" + split + "' has no labels");
    images.push_back(&s.image);
    gts.push_back(s.label);
  }
  const auto preds = eval::predict_dataset(model, images);
  const int c = model.descriptor().num_classes;
  if (model.descriptor().kind == nn::ModelKind::kClassifier) {
    std::vector<int> p, t;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      p.push_back(preds[i].at(0));
      t.push_back(gts[i].at(0));
    }
    const auto acc = eval::accuracy(p, t);
    out.push_back({step, split, "accuracy", -1, acc.overall});
    out.push_back({step, split, "mean_class_accuracy", -1, acc.per_class_mean});
    for (int k = 0; k < c; ++k) {
      std::size_t hit = 0, tot = 0;
      for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] == k) {
          ++tot;
          hit += p[i] == k;
        }
      if (tot) out.push_back({step, split, "class_accuracy", k, static_cast<double>(hit) / static_cast<double>(tot)});
    }
    return;
  }
  const auto r = eval::miou(preds, gts, c);
  out.push_back({step, split, "miou", -1, r.miou});
  for (int k = 0; k < c; ++k) {
    const double v = r.per_class[static_cast<std::size_t>(k)];
    if (!std::isnan(v)) out.push_back({step, split, "iou", k, v});
  }
}

}  // namespace

std::vector<MetricPoint> evaluate(const nn::ModelParams& model, const TrainData& data, int step) {
  std::vector<MetricPoint> out;
  if (data.target_val) eval_split(model, *data.target_val, "target_val", step, out);
  if (data.source_val) eval_split(model, *data.source_val, "source_val", step, out);
  return out;
}

void run_steps(TrainState& s, const TrainConfig& cfg, const TrainData& data, int until_step,
               const StepHook& after_step) {
  if (!data.source_train || !data.target_train) throw ConfigError("training needs source and target datasets");
  const auto& src = *data.source_train;
  const auto& tgt = *data.target_train;
  const bool supervised = cfg.host == HostMethod::kSupervisedTarget;
  if (supervised && !tgt.sealed() && (tgt.samples.empty() || tgt.samples.front().label.empty())) {
    throw ConfigError("supervised_target needs target training labels");
  }
  const bool classifier = cfg.arch.kind == nn::ModelKind::kClassifier;
  const bool teacher_used = cfg.host == HostMethod::kSelfTraining || cfg.mic.enabled;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  until_step = std::min(until_step, cfg.steps);

  while (s.step < until_step) {
    const bool adapt = s.step >= cfg.warmup_steps;
    const bool need_teacher = adapt && teacher_used;
    std::vector<std::size_t> si(bs), ti(bs);
    for (auto& i : si) i = s.rng.data.uniform_int(src.samples.size());
    for (auto& i : ti) i = s.rng.data.uniform_int(tgt.samples.size());
    const ag::Tensor x_t = gather_images(tgt, ti);
    const ag::Tensor x_src = gather_images(src, si);
    const std::vector<int> y_src = gather_labels(src, si);
    // Supervised-target runs take L^S from labeled target images.
    const ag::Tensor& x_s = supervised ? x_t : x_src;
    const std::vector<int> y_s =
        supervised ? (tgt.sealed() ? gather_labels(tgt.sealed_labels, ti) : gather_labels(tgt, ti)) : y_src;

    std::vector<pl::PseudoLabel> pls;
    if (need_teacher) {
      pls = teacher_pseudo_labels(s.teacher.params(), x_t, cfg.host_cfg.tau);
      if (cfg.host_cfg.pl_noise > 0.0 && !classifier) {
        for (auto& p : pls) p = pl::inject_pl_noise(p, cfg.host_cfg.pl_noise, s.rng.noise);
      }
    }

    s.student.clear_grad();
    if (s.disc) s.disc->params.clear_grad();
    ag::Graph g;
    LossTerms terms;
    terms.source = source_loss(g, s.student, x_s, y_s);
    switch (adapt ? cfg.host : HostMethod::kSourceOnly) {
      case HostMethod::kEntropyMin: terms.target = entropy_loss(g, s.student, x_t); break;
      case HostMethod::kAdversarial:
        terms.target = adversarial_losses(g, s.student, *s.disc, x_src, x_t).disc_side;
        break;
      case HostMethod::kSelfTraining:
        terms.target = self_training_loss(g, s.student, x_src, y_src, x_t, pls, cfg.host_cfg.mix_color_aug, cfg.aug,
                                          s.rng.mix, s.rng.aug);
        break;
      default: break;
    }
    double q_sum = 0.0;
    if (adapt && cfg.mic.enabled) {
      if (cfg.mic.mask_target) {
        std::vector<pl::PseudoLabel> mic_pls = pls;
        if (!cfg.mic.use_ema_teacher) {
          mic_pls = teacher_pseudo_labels(s.student, x_t, cfg.mic.tau);
        } else if (cfg.mic.tau != cfg.host_cfg.tau && !classifier) {
          // Same labels, quality re-thresholded.
          const ag::Tensor probs = nn::predict_probs(s.teacher.params(), x_t);
          for (std::size_t i = 0; i < mic_pls.size(); ++i) {
            const std::size_t per = probs.numel() / probs.dim(0);
            const auto v = probs.values();
            const ag::Tensor p({probs.dim(1), probs.dim(2), probs.dim(3)},
                               std::vector<double>(v.begin() + static_cast<long>(i * per),
                                                   v.begin() + static_cast<long>((i + 1) * per)));
            mic_pls[i].quality = pl::quality_seg(p, cfg.mic.tau);
          }
        }
        for (const auto& p : mic_pls) q_sum += cfg.mic.use_quality_weight ? p.quality : 1.0;
        terms.mic = mic_loss(g, s.student, x_t, mic_pls, cfg.mic, cfg.aug, s.rng.mask, s.rng.aug);
      }
      if (cfg.mic.mask_source) {
        terms.mic_source = mic_source_loss(g, s.student, x_src, y_src, cfg.mic, cfg.aug, s.rng.mask, s.rng.aug);
      }
    } else if (!pls.empty()) {
      for (const auto& p : pls) q_sum += p.quality;
    }
    const ag::Tensor total = total_objective(g, terms, cfg.weights);
    require_finite(total.item(), s.step, "total");
    g.backward(total);
    s.optimizer.step(s.student);
    if (s.disc) s.disc_optimizer.step(s.disc->params);
    s.teacher.update(s.student);
    ++s.step;

    s.accum.source += terms.source.item();
    if (terms.target.defined()) s.accum.target += terms.target.item();
    if (terms.mic.defined()) s.accum.mic += terms.mic.item();
    if (terms.mic_source.defined()) s.accum.mic += terms.mic_source.item();
    if (need_teacher) {
      s.accum.quality += q_sum / static_cast<double>(bs);
      ++s.accum.quality_count;
    }
    ++s.accum.steps;

    if (s.step % cfg.eval_interval == 0 || s.step == cfg.steps) {
      const double n = static_cast<double>(std::max<std::int64_t>(1, s.accum.steps));
      s.history.push_back({s.step, "train", "loss_source", -1, s.accum.source / n});
      s.history.push_back({s.step, "train", "loss_target", -1, s.accum.target / n});
      s.history.push_back({s.step, "train", "loss_mic", -1, s.accum.mic / n});
      if (s.accum.quality_count > 0) {
        s.history.push_back(
            {s.step, "train", "quality", -1, s.accum.quality / static_cast<double>(s.accum.quality_count)});
      }
      s.accum = {};
      auto m = evaluate(s.student, data, s.step);
      s.history.insert(s.history.end(), m.begin(), m.end());
    }
    if (after_step) after_step(s);
  }
}

TrainState train(const TrainConfig& cfg, const TrainData& data) {
  TrainState s = init_state(cfg);
  run_steps(s, cfg, data, cfg.steps);
  return s;
}

}  // namespace miclab::uda
