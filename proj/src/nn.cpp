#include "fccdn/nn.hpp"

#include <cmath>

namespace fccdn::nn {

Tensor he_normal(const std::vector<int>& shape, int fan_in, std::uint64_t seed, const std::string& name) {
  Tensor t(shape);
  DetRng rng = DetRng::derive(seed, name);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

Conv2d::Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
               bool bias, std::uint64_t seed)
    : stride_(stride), pad_(pad), bias_(bias) {
  if (in_ch <= 0 || out_ch <= 0) throw std::invalid_argument("conv2d: bad channel count");
  w_ = std::make_shared<Parameter>(
      name + ".weight", he_normal({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, seed, name + ".weight"));
  register_param(w_);
  if (bias_) {
    b_ = std::make_shared<Parameter>(name + ".bias", Tensor({out_ch}));
    register_param(b_);
  }
}

BatchNorm2d::BatchNorm2d(const std::string& name, int channels, double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
  gamma_ = std::make_shared<Parameter>(name + ".gamma", Tensor({channels}, 1.0));
  beta_ = std::make_shared<Parameter>(name + ".beta", Tensor({channels}));
  run_mean_ = std::make_shared<Parameter>(name + ".running_mean", Tensor({channels}), false);
  run_var_ = std::make_shared<Parameter>(name + ".running_var", Tensor({channels}, 1.0), false);
  register_param(gamma_);
  register_param(beta_);
  register_param(run_mean_);
  register_param(run_var_);
}

Var BatchNorm2d::forward(const Var& x) {
  auto r = ops::batch_norm(x, Var::leaf(gamma_), Var::leaf(beta_), run_mean_->value, run_var_->value,
                           training_, eps_);
  if (training_) {
    const int c = x.shape()[1];
    for (int ch = 0; ch < c; ++ch) {
      run_mean_->value.data[ch] =
          (1.0 - momentum_) * run_mean_->value.data[ch] + momentum_ * r.batch_mean.data[ch];
      run_var_->value.data[ch] =
          (1.0 - momentum_) * run_var_->value.data[ch] + momentum_ * r.batch_var.data[ch];
    }
  }
  return r.y;
}

Linear::Linear(const std::string& name, int in_features, int out_features, bool bias, std::uint64_t seed)
    : bias_(bias) {
  w_ = std::make_shared<Parameter>(name + ".weight",
                                   he_normal({out_features, in_features}, in_features, seed, name + ".weight"));
  register_param(w_);
  if (bias_) {
    b_ = std::make_shared<Parameter>(name + ".bias", Tensor({out_features}));
    register_param(b_);
  }
}

ConvBnRelu::ConvBnRelu(const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                       int pad, std::uint64_t seed) {
  conv_ = std::make_shared<Conv2d>(name + ".conv", in_ch, out_ch, kernel, stride, pad, false, seed);
  bn_ = std::make_shared<BatchNorm2d>(name + ".bn", out_ch);
  register_child(conv_);
  register_child(bn_);
}

}  // namespace fccdn::nn
