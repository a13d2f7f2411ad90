#ifndef SFANET_METRICS_HPP
#define SFANET_METRICS_HPP

#include <cstdint>
#include <vector>

#include "sfanet/labels.hpp"

namespace sfanet {

// N x N pixel counts, rows = ground truth class, cols = predicted class.
// Pixels whose ground-truth label is the ignore value are not counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(const uint8_t* gt, const uint8_t* pred, int64_t count,
           int ignore_label = kIgnoreLabel);
  void add(const LabelMap& gt, const LabelMap& pred, int ignore_label = kIgnoreLabel);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return nc_; }
  int64_t count(int gt, int pred) const;
  int64_t total() const;

  // IoU per class; classes absent from both ground truth and prediction get
  // NaN and are excluded from miou(). miou() errors when every class is absent.
  std::vector<double> per_class_iou() const;
  double miou() const;

 private:
  int nc_;
  std::vector<int64_t> counts_;
};

}  // namespace sfanet

#endif
