#pragma once

#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "fccdn/ops.hpp"

namespace fccdn::nn {

/// Base for parameter-holding building blocks. Weight sharing is expressed by
/// holding the same child module (or the same ParamPtr) in more than one
/// place; collection dedupes by parameter identity.
class Module {
 public:
  virtual ~Module() = default;

  void register_param(const ParamPtr& p) { params_.push_back(p); }
  void register_child(const std::shared_ptr<Module>& m) { children_.push_back(m); }

  virtual void set_training(bool training) {
    for (auto& c : children_) c->set_training(training);
  }

  void collect_params(std::vector<ParamPtr>& out, std::unordered_set<const Parameter*>& seen) const {
    for (const auto& p : params_)
      if (seen.insert(p.get()).second) out.push_back(p);
    for (const auto& c : children_) c->collect_params(out, seen);
  }

  std::vector<ParamPtr> parameters() const {
    std::vector<ParamPtr> out;
    std::unordered_set<const Parameter*> seen;
    collect_params(out, seen);
    return out;
  }

 protected:
  std::vector<ParamPtr> params_;
  std::vector<std::shared_ptr<Module>> children_;
};

/// Fan-in-scaled normal init; the stream is derived from (seed, tensor name)
/// so values do not depend on construction order.
Tensor he_normal(const std::vector<int>& shape, int fan_in, std::uint64_t seed, const std::string& name);

class Conv2d : public Module {
 public:
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
         bool bias, std::uint64_t seed);

  Var forward(const Var& x) const {
    return ops::conv2d(x, Var::leaf(w_), bias_ ? Var::leaf(b_) : Var(), stride_, pad_);
  }

  ParamPtr weight() const { return w_; }
  ParamPtr bias() const { return b_; }

 private:
  ParamPtr w_, b_;
  int stride_, pad_;
  bool bias_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d(const std::string& name, int channels, double momentum = 0.1, double eps = 1e-5);

  Var forward(const Var& x);

  void set_training(bool training) override {
    training_ = training;
    Module::set_training(training);
  }
  bool is_training() const { return training_; }

  ParamPtr gamma() const { return gamma_; }
  ParamPtr beta() const { return beta_; }
  ParamPtr running_mean() const { return run_mean_; }
  ParamPtr running_var() const { return run_var_; }

 private:
  ParamPtr gamma_, beta_, run_mean_, run_var_;
  double momentum_, eps_;
  bool training_ = true;
};

class Linear : public Module {
 public:
  Linear(const std::string& name, int in_features, int out_features, bool bias, std::uint64_t seed);

  Var forward(const Var& x) const {
    return ops::linear(x, Var::leaf(w_), bias_ ? Var::leaf(b_) : Var());
  }

 private:
  ParamPtr w_, b_;
  bool bias_;
};

/// conv -> BN -> ReLU, the combination used throughout the fusion blocks.
class ConvBnRelu : public Module {
 public:
  ConvBnRelu(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
             std::uint64_t seed);
  Var forward(const Var& x) { return ops::relu(bn_->forward(conv_->forward(x))); }

  Conv2d& conv() { return *conv_; }
  BatchNorm2d& bn() { return *bn_; }

 private:
  std::shared_ptr<Conv2d> conv_;
  std::shared_ptr<BatchNorm2d> bn_;
};

}  // namespace fccdn::nn
