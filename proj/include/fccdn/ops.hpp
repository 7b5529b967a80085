#pragma once

#include <vector>

#include "fccdn/autodiff.hpp"

namespace fccdn::ops {

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var vlog(const Var& a);
Var vabs(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// Reductions to a scalar.
Var sum(const Var& a);
Var mean(const Var& a);

// Shape.
Var reshape(const Var& a, std::vector<int> s);
Var concat_channels(const std::vector<Var>& xs);  // NCHW, dim 1
Var upsample_nearest2(const Var& x);

// Batched matrices (N,A,B).
Var transpose12(const Var& x);
Var bmm(const Var& a, const Var& b);
Var softmax_lastdim(const Var& x);
Var softmax_channels(const Var& x);  // NCHW, per-pixel softmax over C
Var vdiv(const Var& a, const Var& b);

// Neural net primitives. conv2d pads with reflect-101 so tile borders see
// plausible context instead of zeros.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var linear(const Var& x, const Var& w, const Var& b);
Var global_avg_pool(const Var& x);           // (N,C,H,W) -> (N,C)
Var channel_scale(const Var& x, const Var& g);  // g: (N,C)

struct BatchNormOut {
  Var y;
  Tensor batch_mean;  // per channel, only filled in training mode
  Tensor batch_var;
};
BatchNormOut batch_norm(const Var& x, const Var& gamma, const Var& beta,
                        const Tensor& run_mean, const Tensor& run_var, bool training,
                        double eps);

}  // namespace fccdn::ops
