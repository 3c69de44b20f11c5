#include "fusionunet/metrics.hpp"

#include <stdexcept>
#include <string>

namespace fusionunet {

double ClassOverlap::dice() const {
  if (!present()) return 1.0;
  return 2.0 * static_cast<double>(intersection) / static_cast<double>(predicted + actual);
}

double ClassOverlap::iou() const {
  if (!present()) return 1.0;
  return static_cast<double>(intersection) / static_cast<double>(predicted + actual - intersection);
}

std::vector<ClassOverlap> class_overlaps(const LabelMap& predicted, const LabelMap& truth, Index n_classes) {
  if (predicted.height != truth.height || predicted.width != truth.width ||
      predicted.labels.size() != truth.labels.size()) {
    throw std::invalid_argument("metric masks differ in shape: " + std::to_string(predicted.height) + "x" +
                                std::to_string(predicted.width) + " vs " + std::to_string(truth.height) + "x" +
                                std::to_string(truth.width));
  }
  std::vector<ClassOverlap> out(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    const auto a = predicted.labels[i], b = truth.labels[i];
    if (a < 0 || a >= n_classes || b < 0 || b >= n_classes) throw std::invalid_argument("metric label out of range");
    ++out[static_cast<std::size_t>(a)].predicted;
    ++out[static_cast<std::size_t>(b)].actual;
    if (a == b) ++out[static_cast<std::size_t>(a)].intersection;
  }
  return out;
}

namespace {

template <typename Fn>
double mean_over_present(const std::vector<ClassOverlap>& overlaps, Fn score) {
  double total = 0.0;
  int count = 0;
  for (const auto& o : overlaps) {
    if (!o.present()) continue;
    total += score(o);
    ++count;
  }
  return count == 0 ? 1.0 : total / count;
}

}  // namespace

double dice_metric(const LabelMap& predicted, const LabelMap& truth, Index n_classes) {
  return mean_over_present(class_overlaps(predicted, truth, n_classes), [](const ClassOverlap& o) { return o.dice(); });
}

double iou_metric(const LabelMap& predicted, const LabelMap& truth, Index n_classes) {
  return mean_over_present(class_overlaps(predicted, truth, n_classes), [](const ClassOverlap& o) { return o.iou(); });
}

template <typename Scalar>
LabelMap argmax_classes(const Scalar* logits, Index n_classes, Index height, Index width) {
  LabelMap out(height, width);
  const Index P = height * width;
  for (Index p = 0; p < P; ++p) {
    Index best = 0;
    for (Index k = 1; k < n_classes; ++k) {
      if (logits[k * P + p] > logits[best * P + p]) best = k;
    }
    out.labels[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(best);
  }
  return out;
}

template LabelMap argmax_classes(const float*, Index, Index, Index);
template LabelMap argmax_classes(const double*, Index, Index, Index);

}  // namespace fusionunet
