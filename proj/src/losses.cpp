#include "fccdn/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace fccdn {

using namespace ops;

namespace {

void check_shapes(const Var& pred, const Tensor& target, const char* op) {
  if (pred.shape() != target.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(pred.shape()) +
                                " vs " + shape_str(target.shape));
}

void check_binary(const Tensor& t, const char* what) {
  for (double v : t.data)
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument(std::string(what) + ": values must be exactly 0 or 1");
}

double mask_count(const Tensor& mask) {
  double c = 0.0;
  for (double v : mask.data) c += v;
  return c;
}

Var const_scalar(double v) { return Var(Tensor::scalar(v)); }

/// -(y*log(p) + (1-y)*log(1-p)) per pixel, summed with the given weights and
/// normalized by `denom`.
Var weighted_bce_sum(const Var& pred, const Tensor& target, const Tensor& weights, double denom) {
  Var p = clamp(pred, kPredClampEps, 1.0 - kPredClampEps);
  Var one_minus_p = add_scalar(scale(p, -1.0), 1.0);
  Tensor wy(target.shape), w1my(target.shape);
  for (std::int64_t i = 0; i < target.numel(); ++i) {
    wy.data[i] = weights.data[i] * target.data[i];
    w1my.data[i] = weights.data[i] * (1.0 - target.data[i]);
  }
  Var pos = sum(mul(vlog(p), Var(std::move(wy))));
  Var neg = sum(mul(vlog(one_minus_p), Var(std::move(w1my))));
  return scale(add(pos, neg), -1.0 / denom);
}

/// 1 - (2*sum(w*p*y) + eps) / (sum(w*p) + sum(w*y) + eps)
Var weighted_dice(const Var& pred, const Tensor& target, const Tensor& weights) {
  Tensor wy(target.shape);
  for (std::int64_t i = 0; i < target.numel(); ++i) wy.data[i] = weights.data[i] * target.data[i];
  Var w(weights);
  Var inter = sum(mul(pred, Var(std::move(wy))));
  Var px = sum(mul(pred, w));
  double py = 0.0;
  for (std::int64_t i = 0; i < target.numel(); ++i) py += weights.data[i] * target.data[i];
  Var num = add_scalar(scale(inter, 2.0), kDiceSmooth);
  Var den = add_scalar(add_scalar(px, py), kDiceSmooth);
  return add_scalar(scale(vdiv(num, den), -1.0), 1.0);
}

}  // namespace

Var bce_loss(const Var& pred, const Tensor& target) {
  check_shapes(pred, target, "bce_loss");
  Tensor ones(target.shape, 1.0);
  return weighted_bce_sum(pred, target, ones, static_cast<double>(target.numel()));
}

Var dice_loss(const Var& pred, const Tensor& target) {
  check_shapes(pred, target, "dice_loss");
  Tensor ones(target.shape, 1.0);
  return weighted_dice(pred, target, ones);
}

Var bce_dice(const Var& pred, const Tensor& target) {
  return add(bce_loss(pred, target), dice_loss(pred, target));
}

Var masked_bce(const Var& pred, const Tensor& target, const Tensor& mask) {
  check_shapes(pred, target, "masked_bce");
  check_shapes(pred, mask, "masked_bce");
  double cnt = mask_count(mask);
  if (cnt == 0.0) return const_scalar(0.0);
  return weighted_bce_sum(pred, target, mask, cnt);
}

Var masked_dice(const Var& pred, const Tensor& target, const Tensor& mask) {
  check_shapes(pred, target, "masked_dice");
  check_shapes(pred, mask, "masked_dice");
  if (mask_count(mask) == 0.0) return const_scalar(0.0);
  return weighted_dice(pred, target, mask);
}

Var masked_bce_dice(const Var& pred, const Tensor& target, const Tensor& mask) {
  if (mask_count(mask) == 0.0) return const_scalar(0.0);
  return add(masked_bce(pred, target, mask), masked_dice(pred, target, mask));
}

Var masked_mse(const Var& a, const Var& b, const Tensor& mask) {
  if (a.shape() != b.shape() || a.shape() != mask.shape)
    throw std::invalid_argument("masked_mse: shape mismatch");
  double cnt = mask_count(mask);
  if (cnt == 0.0) return const_scalar(0.0);
  Var d = sub(a, b);
  return scale(sum(mul(mul(d, d), Var(mask))), 1.0 / cnt);
}

PseudoLabelPair make_pseudolabels(const ModelOutputs& outputs, const Tensor& change_label) {
  if (!outputs.has_seg())
    throw std::invalid_argument("make_pseudolabels: model outputs carry no segmentation heads");
  check_binary(change_label, "change_label");
  const Tensor& s1 = outputs.seg1->value();
  const Tensor& s2 = outputs.seg2->value();
  PseudoLabelPair pl;
  pl.changed_mask = change_label;
  const int k = s1.shape[1];
  if (k == 1) {
    pl.p1 = Tensor(s1.shape);
    pl.p2 = Tensor(s2.shape);
    for (std::int64_t i = 0; i < s1.numel(); ++i) pl.p1.data[i] = s1.data[i] >= 0.5 ? 1.0 : 0.0;
    for (std::int64_t i = 0; i < s2.numel(); ++i) pl.p2.data[i] = s2.data[i] >= 0.5 ? 1.0 : 0.0;
  } else {
    // class-index maps (N,1,H,W) from per-pixel argmax
    const int n = s1.shape[0];
    const std::int64_t area = static_cast<std::int64_t>(s1.shape[2]) * s1.shape[3];
    pl.p1 = Tensor({n, 1, s1.shape[2], s1.shape[3]});
    pl.p2 = Tensor({n, 1, s1.shape[2], s1.shape[3]});
    auto argmax_into = [&](const Tensor& s, Tensor& out) {
      for (int b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < area; ++i) {
          const double* base = s.data.data() + static_cast<std::int64_t>(b) * k * area;
          int best = 0;
          for (int c = 1; c < k; ++c)
            if (base[c * area + i] > base[best * area + i]) best = c;
          out.data[static_cast<std::int64_t>(b) * area + i] = best;
        }
    };
    argmax_into(s1, pl.p1);
    argmax_into(s2, pl.p2);
  }
  return pl;
}

std::pair<Var, Var> ssl_aux_loss(const ModelOutputs& outputs, const PseudoLabelPair& pl) {
  if (!outputs.has_seg()) throw std::invalid_argument("ssl_aux_loss: no segmentation outputs");
  if (outputs.seg1->shape()[1] != 1)
    throw std::invalid_argument("ssl_aux_loss: binary mode only; use multiclass_ssl_loss");
  check_binary(pl.changed_mask, "changed_mask");

  const Tensor& c = pl.changed_mask;
  Tensor u(c.shape);
  for (std::int64_t i = 0; i < c.numel(); ++i) u.data[i] = 1.0 - c.data[i];

  Tensor inv_p1(pl.p1.shape), inv_p2(pl.p2.shape);
  for (std::int64_t i = 0; i < pl.p1.numel(); ++i) inv_p1.data[i] = 1.0 - pl.p1.data[i];
  for (std::int64_t i = 0; i < pl.p2.numel(); ++i) inv_p2.data[i] = 1.0 - pl.p2.data[i];

  Var l_seg1 = add(masked_bce_dice(*outputs.seg1, pl.p2, u), masked_bce_dice(*outputs.seg1, inv_p2, c));
  Var l_seg2 = add(masked_bce_dice(*outputs.seg2, pl.p1, u), masked_bce_dice(*outputs.seg2, inv_p1, c));
  return {l_seg1, l_seg2};
}

TotalLoss total_loss_binary(const ModelOutputs& outputs, const Tensor& change_label,
                            double seg_weight, bool ssl_active) {
  TotalLoss out;
  Var l_change = bce_dice(outputs.change_score, change_label);
  out.report.change = l_change.item();
  Var total = l_change;
  if (outputs.has_seg() && ssl_active) {
    PseudoLabelPair pl = make_pseudolabels(outputs, change_label);
    auto [l1, l2] = ssl_aux_loss(outputs, pl);
    out.report.seg1 = l1.item();
    out.report.seg2 = l2.item();
    total = add(total, scale(add(l1, l2), seg_weight));
  }
  out.value = total;
  out.report.total = total.item();
  return out;
}

Var contrastive_aux_loss(const ModelOutputs& outputs, const Tensor& change_label) {
  if (!outputs.has_seg())
    throw std::invalid_argument("contrastive_aux_loss: model outputs carry no auxiliary branches");
  check_binary(change_label, "change_label");
  const Tensor& c = change_label;
  Tensor u(c.shape);
  for (std::int64_t i = 0; i < c.numel(); ++i) u.data[i] = 1.0 - c.data[i];
  Var pulled = masked_mse(*outputs.seg1, *outputs.seg2, u);
  Var pushed = masked_mse(*outputs.seg1, *outputs.seg2, c);
  return sub(pulled, pushed);
}

TotalLoss total_loss_contrastive(const ModelOutputs& outputs, const Tensor& change_label,
                                 double aux_weight, bool aux_active) {
  TotalLoss out;
  Var l_change = bce_dice(outputs.change_score, change_label);
  out.report.change = l_change.item();
  Var total = l_change;
  if (outputs.has_seg() && aux_active) {
    Var l_aux = contrastive_aux_loss(outputs, change_label);
    out.report.aux = l_aux.item();
    total = add(total, scale(l_aux, aux_weight));
  }
  out.value = total;
  out.report.total = total.item();
  return out;
}

namespace {

/// Macro-averaged CE + dice over class indices, restricted to `mask`.
/// `labels` is a (N,1,H,W) class-index map; pixels with negative labels are
/// skipped.
Var multiclass_ce_dice(const Var& scores, const Tensor& labels, const Tensor& mask) {
  const auto& s = scores.shape();
  const int n = s[0], k = s[1];
  const std::int64_t area = static_cast<std::int64_t>(s[2]) * s[3];

  // Effective mask: requested region and a valid label.
  Tensor m({n, 1, s[2], s[3]});
  double cnt = 0.0;
  for (std::int64_t i = 0; i < m.numel(); ++i) {
    double on = mask.data[i] != 0.0 && labels.data[i] >= 0.0 ? 1.0 : 0.0;
    m.data[i] = on;
    cnt += on;
  }
  if (cnt == 0.0) return Var(Tensor::scalar(0.0));

  // One-hot weights onto the score tensor layout.
  Tensor onehot(s);
  for (int b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < area; ++i) {
      std::int64_t mi = static_cast<std::int64_t>(b) * area + i;
      if (m.data[mi] == 0.0) continue;
      int cls = static_cast<int>(labels.data[mi]);
      if (cls < 0 || cls >= k) throw std::invalid_argument("multiclass loss: class index out of range");
      onehot.data[(static_cast<std::int64_t>(b) * k + cls) * area + i] = 1.0;
    }

  Var p = clamp(scores, kPredClampEps, 1.0);
  Var ce = scale(sum(mul(vlog(p), Var(onehot))), -1.0 / cnt);

  // Per-class soft dice, macro-averaged across classes.
  Var dice_acc = Var(Tensor::scalar(0.0));
  for (int cls = 0; cls < k; ++cls) {
    Tensor wmask(s);  // region mask on channel `cls` only
    Tensor wtarget(s);
    for (int b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < area; ++i) {
        std::int64_t mi = static_cast<std::int64_t>(b) * area + i;
        if (m.data[mi] == 0.0) continue;
        std::int64_t si = (static_cast<std::int64_t>(b) * k + cls) * area + i;
        wmask.data[si] = 1.0;
        wtarget.data[si] = onehot.data[si];
      }
    Var inter = sum(mul(scores, Var(wtarget)));
    Var px = sum(mul(scores, Var(wmask)));
    double py = 0.0;
    for (std::int64_t i = 0; i < wtarget.numel(); ++i) py += wtarget.data[i];
    Var num = add_scalar(scale(inter, 2.0), kDiceSmooth);
    Var den = add_scalar(add_scalar(px, py), kDiceSmooth);
    dice_acc = add(dice_acc, add_scalar(scale(vdiv(num, den), -1.0), 1.0));
  }
  return add(ce, scale(dice_acc, 1.0 / k));
}

}  // namespace

MulticlassLossResult multiclass_ssl_loss(const ModelOutputs& outputs, const Tensor& change_label,
                                         const Tensor& class_labels_t1, const Tensor& class_labels_t2,
                                         const MulticlassLossOptions& opt) {
  if (!outputs.has_seg() || outputs.seg1->shape()[1] < 2)
    throw std::invalid_argument("multiclass_ssl_loss: needs multiclass segmentation heads");
  check_binary(change_label, "change_label");

  MulticlassLossResult res;
  const Tensor& c = change_label;
  Tensor u(c.shape);
  for (std::int64_t i = 0; i < c.numel(); ++i) u.data[i] = 1.0 - c.data[i];

  for (std::int64_t i = 0; i < c.numel(); ++i) {
    if (c.data[i] == 0.0 && (class_labels_t1.data[i] >= 0.0 || class_labels_t2.data[i] >= 0.0)) {
      res.labels_on_unchanged = true;
      break;
    }
  }

  Var l_change = bce_dice(outputs.change_score, c);

  Var l_c = add(multiclass_ce_dice(*outputs.seg1, class_labels_t1, c),
                multiclass_ce_dice(*outputs.seg2, class_labels_t2, c));

  Var l_u = Var(Tensor::scalar(0.0));
  if (opt.ssl_active) {
    PseudoLabelPair pl = make_pseudolabels(outputs, c);
    // Both terms over the unchanged area; the printed form's i-in-C in the
    // second term contradicts the surrounding prose and is not used.
    l_u = add(multiclass_ce_dice(*outputs.seg1, pl.p2, u),
              multiclass_ce_dice(*outputs.seg2, pl.p1, u));
  }

  res.loss.report.change = l_change.item();
  res.loss.report.lc = l_c.item();
  res.loss.report.lu = l_u.item();
  res.loss.value = add(add(scale(l_change, opt.change_weight), scale(l_c, opt.supervised_weight)),
                       scale(l_u, opt.ssl_weight));
  res.loss.report.total = res.loss.value.item();
  return res;
}

}  // namespace fccdn
