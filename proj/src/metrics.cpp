#include "fccdn/metrics.hpp"

#include <stdexcept>

namespace fccdn {

void accumulate(const Tensor& pred, const Tensor& target, ConfusionCounts& counts) {
  if (pred.shape != target.shape)
    throw std::invalid_argument("accumulate: shape mismatch " + shape_str(pred.shape) + " vs " +
                                shape_str(target.shape));
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    double p = pred.data[i], t = target.data[i];
    if ((p != 0.0 && p != 1.0) || (t != 0.0 && t != 1.0))
      throw std::invalid_argument("accumulate: inputs must be binary (0 or 1)");
    if (p == 1.0 && t == 1.0)
      ++counts.tp;
    else if (p == 1.0)
      ++counts.fp;
    else if (t == 1.0)
      ++counts.fn;
    else
      ++counts.tn;
  }
}

MetricsReport compute_metrics(const ConfusionCounts& c) {
  MetricsReport r;
  const double tp = static_cast<double>(c.tp);
  if (c.tp + c.fp > 0)
    r.precision = tp / static_cast<double>(c.tp + c.fp);
  else
    r.empty = true;
  if (c.tp + c.fn > 0)
    r.recall = tp / static_cast<double>(c.tp + c.fn);
  else
    r.empty = true;
  if (c.tp + c.fp + c.fn > 0)
    r.iou = tp / static_cast<double>(c.tp + c.fp + c.fn);
  else
    r.empty = true;
  if (r.precision + r.recall > 0.0)
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  if (c.total() == 0) r.empty = true;
  return r;
}

MulticlassConfusion& MulticlassConfusion::operator+=(const MulticlassConfusion& o) {
  if (num_classes != o.num_classes)
    throw std::invalid_argument("confusion merge: class count mismatch");
  for (std::size_t i = 0; i < m.size(); ++i) m[i] += o.m[i];
  return *this;
}

void accumulate_multiclass(const Tensor& pred, const Tensor& target, MulticlassConfusion& counts) {
  if (pred.shape != target.shape)
    throw std::invalid_argument("accumulate_multiclass: shape mismatch");
  if (counts.num_classes < 2) throw std::invalid_argument("accumulate_multiclass: needs K >= 2");
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    int p = static_cast<int>(pred.data[i]);
    int t = static_cast<int>(target.data[i]);
    if (p < 0 || p >= counts.num_classes || t < 0 || t >= counts.num_classes)
      throw std::invalid_argument("accumulate_multiclass: class index out of range");
    ++counts.at(t, p);
  }
}

std::vector<double> per_class_iou(const MulticlassConfusion& c) {
  std::vector<double> out;
  for (int k = 0; k < c.num_classes; ++k) {
    std::int64_t tp = c.at(k, k), row = 0, col = 0;
    for (int j = 0; j < c.num_classes; ++j) {
      row += c.at(k, j);
      col += c.at(j, k);
    }
    std::int64_t uni = row + col - tp;
    if (uni == 0) continue;  // class absent from target and prediction
    out.push_back(static_cast<double>(tp) / static_cast<double>(uni));
  }
  return out;
}

double compute_miou(const MulticlassConfusion& c) {
  auto ious = per_class_iou(c);
  if (ious.empty()) return 0.0;
  double s = 0.0;
  for (double v : ious) s += v;
  return s / static_cast<double>(ious.size());
}

}  // namespace fccdn
