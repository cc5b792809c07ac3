#include "miclab/evaluation.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "miclab/errors.hpp"
#include "miclab/ops.hpp"
#include "miclab/synthworlds.hpp"

namespace miclab::eval {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : c_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 0) throw ConfigError("class count must be non-negative");
}

void ConfusionMatrix::add(int gt, int pred) {
  if (gt == ag::kIgnoreLabel) {
    ++ignored_;
    return;
  }
  if (gt < 0 || gt >= c_ || pred < 0 || pred >= c_) {
    throw RangeError("label outside [0," + std::to_string(c_) + "): gt=" + std::to_string(gt) +
                     " pred=" + std::to_string(pred));
  }
  ++counts_[static_cast<std::size_t>(gt * c_ + pred)];
}

void ConfusionMatrix::add(const std::vector<int>& gt, const std::vector<int>& pred) {
  if (gt.size() != pred.size()) {
    throw ShapeError("prediction has " + std::to_string(pred.size()) + " entries, ground truth " +
                     std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) add(gt[i], pred[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.c_ != c_) throw ShapeError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  ignored_ += other.ignored_;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

std::vector<double> ConfusionMatrix::iou() const {
  std::vector<double> out(static_cast<std::size_t>(c_), std::numeric_limits<double>::quiet_NaN());
  for (int k = 0; k < c_; ++k) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < c_; ++j) {
      row += at(k, j);
      col += at(j, k);
    }
    const std::uint64_t tp = at(k, k);
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) out[static_cast<std::size_t>(k)] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

double ConfusionMatrix::miou() const {
  double s = 0.0;
  int n = 0;
  for (double v : iou())
    if (!std::isnan(v)) {
      s += v;
      ++n;
    }
  return n ? s / n : 0.0;
}

MiouResult miou(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& gts,
                int num_classes) {
  if (preds.size() != gts.size()) {
    throw ShapeError("miou: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(gts.size()) +
                     " ground-truth maps");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(gts[i], preds[i]);
  return {cm.iou(), cm.miou()};
}

AccuracyResult accuracy(const std::vector<int>& preds, const std::vector<int>& gts) {
  if (preds.size() != gts.size()) throw ShapeError("accuracy: length mismatch");
  if (gts.empty()) return {};
  std::map<int, std::pair<std::size_t, std::size_t>> per;  // class -> (correct, total)
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    auto& e = per[gts[i]];
    ++e.second;
    if (preds[i] == gts[i]) {
      ++e.first;
      ++correct;
    }
  }
  double recall = 0.0;
  for (const auto& [cls, e] : per) recall += static_cast<double>(e.first) / static_cast<double>(e.second);
  return {static_cast<double>(correct) / static_cast<double>(gts.size()), recall / static_cast<double>(per.size())};
}

std::vector<std::vector<int>> predict_dataset(const nn::ModelParams& model,
                                              const std::vector<const ag::Tensor*>& images, std::size_t batch) {
  std::vector<std::vector<int>> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); i += batch) {
    const std::vector<const ag::Tensor*> chunk(images.begin() + static_cast<long>(i),
                                               images.begin() + static_cast<long>(std::min(images.size(), i + batch)));
    auto labels = nn::predict_labels(model, synth::stack_images(chunk));
    for (auto& l : labels) out.push_back(std::move(l));
  }
  return out;
}

ConfusionMatrix context_probe_confusion(const nn::ModelParams& model, const std::vector<const ag::Tensor*>& images,
                                        const std::vector<const std::vector<int>*>& labels, int probe_patch) {
  if (images.size() != labels.size()) throw ShapeError("context_probe: image/label count mismatch");
  ConfusionMatrix cm(model.descriptor().num_classes);
  if (probe_patch <= 0) throw ConfigError("probe patch must be positive");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ag::Tensor& img = *images[i];
    if (img.rank() != 3) throw ShapeError("context_probe: image must be [C,H,W]");
    const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
    const auto p = static_cast<std::size_t>(probe_patch);
    if (h % p != 0 || w % p != 0) {
      throw ShapeError("context_probe: " + std::to_string(h) + "x" + std::to_string(w) +
                       " is not divisible by probe patch " + std::to_string(probe_patch));
    }
    const std::vector<int>& gt = *labels[i];
    if (gt.size() != h * w) throw ShapeError("context_probe: label map size mismatch");
    const std::size_t rows = h / p, cols = w / p, windows = rows * cols, plane = h * w;
    // All windows of one image form one batch.
    std::vector<double> batch(windows * ch * plane);
    for (std::size_t k = 0; k < windows; ++k) {
      double* dst = batch.data() + k * ch * plane;
      std::copy(img.values().begin(), img.values().end(), dst);
      const std::size_t y0 = (k / cols) * p, x0 = (k % cols) * p;
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = y0; y < y0 + p; ++y)
          for (std::size_t x = x0; x < x0 + p; ++x) dst[c * plane + y * w + x] = 0.0;
    }
    const auto preds = nn::predict_labels(model, ag::Tensor({windows, ch, h, w}, std::move(batch)));
    for (std::size_t k = 0; k < windows; ++k) {
      const std::size_t y0 = (k / cols) * p, x0 = (k % cols) * p;
      for (std::size_t y = y0; y < y0 + p; ++y)
        for (std::size_t x = x0; x < x0 + p; ++x) cm.add(gt[y * w + x], preds[k][y * w + x]);
    }
  }
  return cm;
}

double context_probe(const nn::ModelParams& model, const std::vector<const ag::Tensor*>& images,
                     const std::vector<const std::vector<int>*>& labels, int probe_patch) {
  return context_probe_confusion(model, images, labels, probe_patch).miou();
}

}  // namespace miclab::eval
