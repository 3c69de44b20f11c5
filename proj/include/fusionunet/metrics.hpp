#pragma once

#include "fusionunet/data.hpp"

#include <cstdint>
#include <vector>

namespace fusionunet {

/// Pixel counts for one class: |A and B|, |A| (predicted), |B| (truth).
struct ClassOverlap {
  std::int64_t intersection = 0;
  std::int64_t predicted = 0;
  std::int64_t actual = 0;

  bool present() const { return predicted + actual > 0; }
  /// 2|A and B| / (|A| + |B|); 1 when both are empty.
  double dice() const;
  /// |A and B| / |A or B|; 1 when both are empty.
  double iou() const;
};

std::vector<ClassOverlap> class_overlaps(const LabelMap& predicted, const LabelMap& truth, Index n_classes);

/// Mean over classes present in either mask. Throws std::invalid_argument on
/// a shape mismatch.
double dice_metric(const LabelMap& predicted, const LabelMap& truth, Index n_classes);
double iou_metric(const LabelMap& predicted, const LabelMap& truth, Index n_classes);

/// Per-pixel argmax over the class axis of one sample's K x H x W logits,
/// ties to the lower class.
template <typename Scalar>
LabelMap argmax_classes(const Scalar* logits, Index n_classes, Index height, Index width);

}  // namespace fusionunet
