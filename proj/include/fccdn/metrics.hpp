#pragma once

#include <cstdint>
#include <vector>

#include "fccdn/tensor.hpp"

namespace fccdn {

/// Binary confusion accumulator. Merging is plain addition, so shards can be
/// combined in any order.
struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  std::int64_t total() const { return tp + fp + fn + tn; }
};

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double iou = 0.0;
  double f1 = 0.0;
  bool empty = false;  // set when a denominator (or everything) was zero
};

/// pred/target: binary maps of equal shape (values exactly 0 or 1).
void accumulate(const Tensor& pred, const Tensor& target, ConfusionCounts& counts);

MetricsReport compute_metrics(const ConfusionCounts& counts);

/// K-class confusion matrix; entry (t, p) counts target class t predicted as p.
struct MulticlassConfusion {
  int num_classes = 0;
  std::vector<std::int64_t> m;  // row-major K x K

  explicit MulticlassConfusion(int k = 0) : num_classes(k), m(static_cast<std::size_t>(k) * k, 0) {}
  std::int64_t& at(int t, int p) { return m[static_cast<std::size_t>(t) * num_classes + p]; }
  std::int64_t at(int t, int p) const { return m[static_cast<std::size_t>(t) * num_classes + p]; }
  MulticlassConfusion& operator+=(const MulticlassConfusion& o);
};

/// pred/target: class-index maps.
void accumulate_multiclass(const Tensor& pred, const Tensor& target, MulticlassConfusion& counts);

/// Per-class IoU; classes absent from both target and prediction are skipped.
std::vector<double> per_class_iou(const MulticlassConfusion& counts);
double compute_miou(const MulticlassConfusion& counts);

}  // namespace fccdn
