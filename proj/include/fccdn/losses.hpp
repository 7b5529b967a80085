#pragma once

#include "fccdn/network.hpp"

namespace fccdn {

/// Scalar components of one training-loss evaluation. `total` always equals
/// the documented weighted combination of the filled components.
struct LossReport {
  double total = 0.0;
  double change = 0.0;
  double seg1 = 0.0;
  double seg2 = 0.0;
  double aux = 0.0;  // contrastive variant
  double lc = 0.0;   // multiclass: supervised changed-area loss
  double lu = 0.0;   // multiclass: SSL unchanged-area loss
};

struct TotalLoss {
  Var value;  // scalar, differentiable
  LossReport report;
};

/// Thresholded, gradient-detached segmentation maps used as SSL targets.
struct PseudoLabelPair {
  Tensor p1, p2;         // binary maps, or class-index maps in multiclass mode
  Tensor changed_mask;   // C/U partition from the change label
};

constexpr double kPredClampEps = 1e-7;  // predictions clamped to [eps, 1-eps] before logs
constexpr double kDiceSmooth = 1.0;     // added to numerator and denominator

// Plain losses, mean over all pixels. `target` carries no gradient.
Var bce_loss(const Var& pred, const Tensor& target);
Var dice_loss(const Var& pred, const Tensor& target);
Var bce_dice(const Var& pred, const Tensor& target);

// Region-restricted variants; an empty region contributes a constant 0.
Var masked_bce(const Var& pred, const Tensor& target, const Tensor& mask);
Var masked_dice(const Var& pred, const Tensor& target, const Tensor& mask);
Var masked_bce_dice(const Var& pred, const Tensor& target, const Tensor& mask);
Var masked_mse(const Var& a, const Var& b, const Tensor& mask);

/// Threshold at 0.5 (>= maps to 1) and detach. Binary mode thresholds seg
/// scores; multiclass mode stores per-pixel argmax class indices.
PseudoLabelPair make_pseudolabels(const ModelOutputs& outputs, const Tensor& change_label);

/// Cross-branch pseudolabel losses: each branch is pulled toward the other
/// branch's detached labels on unchanged pixels and toward their inverse on
/// changed pixels.
std::pair<Var, Var> ssl_aux_loss(const ModelOutputs& outputs, const PseudoLabelPair& pl);

/// change loss + seg_weight * (l_seg1 + l_seg2). `ssl_active` toggling covers
/// the configurable warm-up delay; seg terms also vanish when the model has
/// no seg heads.
TotalLoss total_loss_binary(const ModelOutputs& outputs, const Tensor& change_label,
                            double seg_weight = 0.2, bool ssl_active = true);

/// MSE(S1,S2 | U) - MSE(S1,S2 | C); bounded in [-1,1] for [0,1]-valued maps.
Var contrastive_aux_loss(const ModelOutputs& outputs, const Tensor& change_label);

/// change loss + 0.2 * contrastive auxiliary term.
TotalLoss total_loss_contrastive(const ModelOutputs& outputs, const Tensor& change_label,
                                 double aux_weight = 0.2, bool aux_active = true);

/// Multiclass: 0.5*l_change + 0.5*l_c + 0.2*l_u. Class labels (class index
/// per pixel, -1 where unlabeled) are only consulted on changed pixels; any
/// labels found on unchanged pixels are masked out and flagged.
struct MulticlassLossOptions {
  double change_weight = 0.5;
  double supervised_weight = 0.5;
  double ssl_weight = 0.2;
  bool ssl_active = true;
};
struct MulticlassLossResult {
  TotalLoss loss;
  bool labels_on_unchanged = false;  // warning flag
};
MulticlassLossResult multiclass_ssl_loss(const ModelOutputs& outputs, const Tensor& change_label,
                                         const Tensor& class_labels_t1, const Tensor& class_labels_t2,
                                         const MulticlassLossOptions& opt = {});

}  // namespace fccdn
