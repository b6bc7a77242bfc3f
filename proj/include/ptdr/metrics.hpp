#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptdr/tensor.hpp"

namespace ptdr {

/// C x C pixel counts; rows index ground truth, columns the prediction.
/// Merging is plain addition, so per-shard matrices can be summed in any
/// order.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int classes)
      : num_classes(classes),
        counts(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0) {}

  std::int64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * num_classes + static_cast<std::size_t>(pred)];
  }
  std::int64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

/// Adds one prediction/ground-truth pair. Masks must have identical shape
/// and class values below num_classes.
void accumulate(ConfusionMatrix& cm, const IntTensor& pred, const IntTensor& gt);

/// Intersection over union for one class; returns false when the union is
/// empty (class absent from both masks).
bool class_iou(const ConfusionMatrix& cm, int cls, double& iou);

/// Mean IoU over classes with non-empty union. Classes missing from both
/// prediction and ground truth are excluded from the mean rather than
/// counted as 0 or 1.
double miou(const ConfusionMatrix& cm);

/// CSV report: one `class,iou` row per scored class plus a final `miou,<v>`
/// aggregate row.
void write_iou_csv(const ConfusionMatrix& cm, const std::string& path);

}  // namespace ptdr
