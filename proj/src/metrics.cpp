#include "sfanet/metrics.hpp"

#include <cmath>
#include <limits>

namespace sfanet {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : nc_(num_classes), counts_(static_cast<size_t>(num_classes) * num_classes, 0) {
  SFA_CHECK(num_classes > 0) << "ConfusionMatrix needs at least one class";
}

void ConfusionMatrix::add(const uint8_t* gt, const uint8_t* pred, int64_t count,
                          int ignore_label) {
  for (int64_t i = 0; i < count; ++i) {
    const int g = gt[i];
    if (g == ignore_label) continue;
    const int p = pred[i];
    SFA_CHECK(g < nc_) << "ground-truth label " << g << " out of range for " << nc_ << " classes";
    SFA_CHECK(p < nc_) << "predicted label " << p << " out of range for " << nc_ << " classes";
    ++counts_[static_cast<size_t>(g) * nc_ + p];
  }
}

void ConfusionMatrix::add(const LabelMap& gt, const LabelMap& pred, int ignore_label) {
  SFA_CHECK(gt.h == pred.h && gt.w == pred.w)
      << "confusion add: extents differ, " << gt.h << "x" << gt.w << " vs " << pred.h << "x"
      << pred.w;
  add(gt.labels.data(), pred.labels.data(), gt.h * gt.w, ignore_label);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  SFA_CHECK(other.nc_ == nc_) << "confusion merge: class counts differ";
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

int64_t ConfusionMatrix::count(int gt, int pred) const {
  SFA_CHECK(gt >= 0 && gt < nc_ && pred >= 0 && pred < nc_) << "confusion count: bad indices";
  return counts_[static_cast<size_t>(gt) * nc_ + pred];
}

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (int64_t v : counts_) t += v;
  return t;
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
  std::vector<double> iou(static_cast<size_t>(nc_), std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < nc_; ++c) {
    const int64_t tp = counts_[static_cast<size_t>(c) * nc_ + c];
    int64_t gt_total = 0, pred_total = 0;
    for (int k = 0; k < nc_; ++k) {
      gt_total += counts_[static_cast<size_t>(c) * nc_ + k];
      pred_total += counts_[static_cast<size_t>(k) * nc_ + c];
    }
    const int64_t denom = gt_total + pred_total - tp;  // TP + FP + FN
    if (denom > 0) iou[static_cast<size_t>(c)] = static_cast<double>(tp) / denom;
  }
  return iou;
}

double ConfusionMatrix::miou() const {
  const std::vector<double> iou = per_class_iou();
  double sum = 0;
  int present = 0;
  for (double v : iou)
    if (!std::isnan(v)) {
      sum += v;
      ++present;
    }
  SFA_CHECK(present > 0) << "miou over an empty confusion matrix";
  return sum / present;
}

}  // namespace sfanet
