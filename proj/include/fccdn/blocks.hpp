#pragma once

#include <optional>
#include <vector>

#include "fccdn/nn.hpp"

namespace fccdn {

/// A feature tensor plus its stride relative to the network input.
struct FeatureMap {
  Var value;
  int stride = 1;
};

/// Four levels at strides [2,4,8,16], channels non-decreasing with stride.
struct FeaturePyramid {
  std::vector<FeatureMap> levels;
  void validate() const;
};

/// Channel attention: GAP -> FC -> ReLU -> FC -> sigmoid -> channelwise gate.
class SqueezeExcite : public nn::Module {
 public:
  SqueezeExcite(const std::string& name, int channels, int ratio, std::uint64_t seed);
  Var forward(const Var& x) const;

  /// Gate vector (N,C) in (0,1); forward() multiplies it onto the input.
  Var gate(const Var& x) const;

  static int bottleneck_size(int channels, int ratio);

 private:
  std::shared_ptr<nn::Linear> fc1_, fc2_;
  int channels_;
};

/// Residual block with an SE gate on the residual branch. When `downsample`
/// is set the first convolution has stride 2 and the identity path is
/// projected.
class SeResNetBlock : public nn::Module {
 public:
  SeResNetBlock(const std::string& name, int in_ch, int out_ch, bool downsample, int se_ratio,
                std::uint64_t seed);
  Var forward(const Var& x);
  bool downsamples() const { return downsample_; }

 private:
  std::shared_ptr<nn::Conv2d> conv1_, conv2_, proj_;
  std::shared_ptr<nn::BatchNorm2d> bn1_, bn2_, proj_bn_;
  std::shared_ptr<SqueezeExcite> se_;
  bool downsample_;
  bool has_proj_;
};

/// One encoder stage: `blocks` SE-ResNet blocks, the first one downsampling.
class EncoderStage : public nn::Module {
 public:
  EncoderStage(const std::string& name, int in_ch, int out_ch, int blocks, int se_ratio,
               std::uint64_t seed);
  Var forward(const Var& x);

 private:
  std::vector<std::shared_ptr<SeResNetBlock>> blocks_;
};

/// Fusion block (upsample a if requested) -> concat -> 3x3 conv -> BN -> ReLU.
class CatFuse : public nn::Module {
 public:
  CatFuse(const std::string& name, int in_a, int in_b, int out_ch, std::uint64_t seed);
  Var forward(const Var& a, const Var& b, bool upsample_a);

 private:
  std::shared_ptr<nn::ConvBnRelu> fuse_;
};

/// Non-local attention: row-softmaxed all-pairs similarity of the input with
/// itself, applied to a convolved value path; the result is turned into a
/// weight map that gates the input by Hadamard product.
class NlBlock : public nn::Module {
 public:
  NlBlock(const std::string& name, int channels, int hw_cap, std::uint64_t seed);
  Var forward(const Var& x) const;

  /// The row-stochastic (N,HW,HW) similarity matrix.
  Var attention(const Var& x) const;

 private:
  void check_cap(const Var& x) const;
  std::shared_ptr<nn::Conv2d> value_conv_, out_conv_;
  int hw_cap_;
};

struct NlFpnConfig {
  std::vector<int> channels;      // per level, strides [2,4,8,16]
  std::vector<int> nl_strides{16, 8};
  int hw_cap = 4096;
};

/// FPN top-down enhancement with NL-blocks; residual, so zero weights give
/// the identity. The upsampling stage holds six convolutions (a 1x1 channel
/// reduction and a 3x3 merge per step).
class NlFpn : public nn::Module {
 public:
  NlFpn(const std::string& name, NlFpnConfig cfg, std::uint64_t seed);
  FeaturePyramid forward(const FeaturePyramid& p);

 private:
  NlFpnConfig cfg_;
  std::shared_ptr<NlBlock> nl16_, nl8_;
  std::vector<std::shared_ptr<nn::ConvBnRelu>> reduce_, merge_;  // coarse->fine order
};

/// One densely connected stream of `depth` 3x3 convolutions (no BN; §3.4),
/// each conv seeing the sum of all previous features; the output is the sum
/// of every stage.
class DenseStream : public nn::Module {
 public:
  DenseStream(const std::string& name, int in_ch, int width, int depth, std::uint64_t seed);
  Var forward(const Var& x) const;

 private:
  std::vector<std::shared_ptr<nn::Conv2d>> convs_;
};

/// DFM: a sum branch and a difference branch, each running one weight-shared
/// dense stream over both inputs; branch outputs are fused by a final
/// normalized 3x3 convolution. Exactly symmetric in its two inputs.
class DenseFusion : public nn::Module {
 public:
  DenseFusion(const std::string& name, int channels, int stream_depth, std::uint64_t seed);
  Var forward(const Var& f1, const Var& f2);

  /// Pre-fusion branch outputs, exposed for tests.
  std::pair<Var, Var> branch_outputs(const Var& f1, const Var& f2) const;

 private:
  std::shared_ptr<DenseStream> sum_stream_, diff_stream_;
  std::shared_ptr<nn::ConvBnRelu> fuse_;
};

}  // namespace fccdn
