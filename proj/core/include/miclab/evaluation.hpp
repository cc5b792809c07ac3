#pragma once

#include <cstdint>
#include <vector>

#include "miclab/nn.hpp"
#include "miclab/tensor.hpp"

namespace miclab::eval {

// Rows are ground truth, columns predictions. Pixels whose ground truth is the
// ignore label are counted separately and excluded from the matrix.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  int num_classes() const { return c_; }
  void add(int gt, int pred);
  void add(const std::vector<int>& gt, const std::vector<int>& pred);
  void merge(const ConfusionMatrix& other);

  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt * c_ + pred)]; }
  std::uint64_t total() const;
  std::uint64_t ignored() const { return ignored_; }

  // IoU per class; NaN for classes absent from both ground truth and prediction.
  std::vector<double> iou() const;
  // Mean IoU over classes with a defined IoU (0 when none).
  double miou() const;

 private:
  int c_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

struct MiouResult {
  std::vector<double> per_class;  // NaN where excluded
  double miou = 0.0;
};

MiouResult miou(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& gts,
                int num_classes);

struct AccuracyResult {
  double overall = 0.0;
  double per_class_mean = 0.0;  // mean recall over classes present in gts
};

AccuracyResult accuracy(const std::vector<int>& preds, const std::vector<int>& gts);

// Predicted label maps for a list of images, evaluated in batches.
std::vector<std::vector<int>> predict_dataset(const nn::ModelParams& model, const std::vector<const ag::Tensor*>& images,
                                              std::size_t batch = 16);

// Masks each non-overlapping probe_patch window in turn and scores the
// predictions inside that window. One confusion matrix over all windows.
ConfusionMatrix context_probe_confusion(const nn::ModelParams& model, const std::vector<const ag::Tensor*>& images,
                                        const std::vector<const std::vector<int>*>& labels, int probe_patch);

double context_probe(const nn::ModelParams& model, const std::vector<const ag::Tensor*>& images,
                     const std::vector<const std::vector<int>*>& labels, int probe_patch);

}  // namespace miclab::eval
