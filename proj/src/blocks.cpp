#include "fccdn/blocks.hpp"

#include <stdexcept>

namespace fccdn {

using namespace ops;

void FeaturePyramid::validate() const {
  if (levels.size() != 4)
    throw std::invalid_argument("pyramid: expected 4 levels, got " + std::to_string(levels.size()));
  const int want[4] = {2, 4, 8, 16};
  int prev_ch = 0;
  for (int i = 0; i < 4; ++i) {
    if (levels[i].stride != want[i])
      throw std::invalid_argument("pyramid: level " + std::to_string(i) + " has stride " +
                                  std::to_string(levels[i].stride));
    int ch = levels[i].value.shape()[1];
    if (ch < prev_ch) throw std::invalid_argument("pyramid: channels must be non-decreasing with stride");
    prev_ch = ch;
  }
}

int SqueezeExcite::bottleneck_size(int channels, int ratio) {
  if (channels <= 0 || ratio <= 0) throw std::invalid_argument("se: bad channels/ratio");
  if (channels <= 4 * ratio) return 4;  // clamp: bottleneck never below 4 units
  if (channels % ratio != 0)
    throw std::invalid_argument("se: channel count " + std::to_string(channels) +
                                " not divisible by reduction ratio " + std::to_string(ratio));
  return channels / ratio;
}

SqueezeExcite::SqueezeExcite(const std::string& name, int channels, int ratio, std::uint64_t seed)
    : channels_(channels) {
  const int mid = bottleneck_size(channels, ratio);
  fc1_ = std::make_shared<nn::Linear>(name + ".fc1", channels, mid, true, seed);
  fc2_ = std::make_shared<nn::Linear>(name + ".fc2", mid, channels, true, seed);
  register_child(fc1_);
  register_child(fc2_);
}

Var SqueezeExcite::gate(const Var& x) const {
  if (x.shape().size() != 4 || x.shape()[1] != channels_)
    throw std::invalid_argument("se: input channels mismatch");
  Var squeezed = global_avg_pool(x);
  return sigmoid(fc2_->forward(relu(fc1_->forward(squeezed))));
}

Var SqueezeExcite::forward(const Var& x) const { return channel_scale(x, gate(x)); }

SeResNetBlock::SeResNetBlock(const std::string& name, int in_ch, int out_ch, bool downsample,
                             int se_ratio, std::uint64_t seed)
    : downsample_(downsample) {
  const int stride = downsample ? 2 : 1;
  conv1_ = std::make_shared<nn::Conv2d>(name + ".conv1", in_ch, out_ch, 3, stride, 1, false, seed);
  bn1_ = std::make_shared<nn::BatchNorm2d>(name + ".bn1", out_ch);
  conv2_ = std::make_shared<nn::Conv2d>(name + ".conv2", out_ch, out_ch, 3, 1, 1, false, seed);
  bn2_ = std::make_shared<nn::BatchNorm2d>(name + ".bn2", out_ch);
  se_ = std::make_shared<SqueezeExcite>(name + ".se", out_ch, se_ratio, seed);
  register_child(conv1_);
  register_child(bn1_);
  register_child(conv2_);
  register_child(bn2_);
  register_child(se_);
  has_proj_ = downsample || in_ch != out_ch;
  if (has_proj_) {
    proj_ = std::make_shared<nn::Conv2d>(name + ".proj", in_ch, out_ch, 1, stride, 0, false, seed);
    proj_bn_ = std::make_shared<nn::BatchNorm2d>(name + ".proj_bn", out_ch);
    register_child(proj_);
    register_child(proj_bn_);
  }
}

Var SeResNetBlock::forward(const Var& x) {
  if (downsample_ && (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0))
    throw std::invalid_argument("se_resnet: odd spatial size " + shape_str(x.shape()) +
                                " cannot be halved");
  Var r = relu(bn1_->forward(conv1_->forward(x)));
  r = bn2_->forward(conv2_->forward(r));
  r = se_->forward(r);
  Var identity = has_proj_ ? proj_bn_->forward(proj_->forward(x)) : x;
  return relu(add(r, identity));
}

EncoderStage::EncoderStage(const std::string& name, int in_ch, int out_ch, int blocks, int se_ratio,
                           std::uint64_t seed) {
  if (blocks < 1) throw std::invalid_argument("encoder stage needs at least one block");
  for (int i = 0; i < blocks; ++i) {
    auto b = std::make_shared<SeResNetBlock>(name + ".block" + std::to_string(i + 1),
                                             i == 0 ? in_ch : out_ch, out_ch, i == 0, se_ratio, seed);
    blocks_.push_back(b);
    register_child(b);
  }
}

Var EncoderStage::forward(const Var& x) {
  Var y = x;
  for (auto& b : blocks_) y = b->forward(y);
  return y;
}

CatFuse::CatFuse(const std::string& name, int in_a, int in_b, int out_ch, std::uint64_t seed) {
  fuse_ = std::make_shared<nn::ConvBnRelu>(name + ".fuse", in_a + in_b, out_ch, 3, 1, 1, seed);
  register_child(fuse_);
}

Var CatFuse::forward(const Var& a, const Var& b, bool upsample_a) {
  Var au = upsample_a ? upsample_nearest2(a) : a;
  if (au.shape()[2] != b.shape()[2] || au.shape()[3] != b.shape()[3])
    throw std::invalid_argument("cat_fuse: spatial mismatch " + shape_str(au.shape()) + " vs " +
                                shape_str(b.shape()));
  return fuse_->forward(concat_channels({au, b}));
}

NlBlock::NlBlock(const std::string& name, int channels, int hw_cap, std::uint64_t seed)
    : hw_cap_(hw_cap) {
  value_conv_ = std::make_shared<nn::Conv2d>(name + ".value", channels, channels, 1, 1, 0, true, seed);
  out_conv_ = std::make_shared<nn::Conv2d>(name + ".out", channels, channels, 1, 1, 0, true, seed);
  register_child(value_conv_);
  register_child(out_conv_);
}

void NlBlock::check_cap(const Var& x) const {
  const auto& s = x.shape();
  const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
  if (hw > hw_cap_)
    throw std::invalid_argument(
        "nl_block: H*W = " + std::to_string(hw) + " exceeds the configured cap of " +
        std::to_string(hw_cap_) +
        "; apply NL-FPN attention only at the stride-16 level for inputs this large");
}

Var NlBlock::attention(const Var& x) const {
  check_cap(x);
  const auto& s = x.shape();
  int n = s[0], c = s[1], hw = s[2] * s[3];
  Var flat = reshape(x, {n, c, hw});
  Var sim = bmm(transpose12(flat), flat);  // (N,HW,HW), row p: <F_p, F_q>
  return softmax_lastdim(sim);
}

Var NlBlock::forward(const Var& x) const {
  const auto& s = x.shape();
  int n = s[0], c = s[1], h = s[2], w = s[3];
  Var attn = attention(x);                                     // (N,HW,HW)
  Var v = reshape(value_conv_->forward(x), {n, c, h * w});     // (N,C,HW)
  Var mixed = bmm(attn, transpose12(v));                       // (N,HW,C)
  Var weight_map = out_conv_->forward(reshape(transpose12(mixed), {n, c, h, w}));
  return mul(weight_map, x);
}

NlFpn::NlFpn(const std::string& name, NlFpnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.channels.size() != 4) throw std::invalid_argument("nl_fpn: needs 4 channel widths");
  auto wants_nl = [&](int stride) {
    for (int s : cfg_.nl_strides)
      if (s == stride) return true;
    return false;
  };
  if (wants_nl(16)) {
    nl16_ = std::make_shared<NlBlock>(name + ".nl16", cfg_.channels[3], cfg_.hw_cap, seed);
    register_child(nl16_);
  }
  if (wants_nl(8)) {
    nl8_ = std::make_shared<NlBlock>(name + ".nl8", cfg_.channels[2], cfg_.hw_cap, seed);
    register_child(nl8_);
  }
  // Top-down steps: 16->8, 8->4, 4->2.
  for (int i = 0; i < 3; ++i) {
    int coarse = cfg_.channels[3 - i], fine = cfg_.channels[2 - i];
    auto r = std::make_shared<nn::ConvBnRelu>(name + ".reduce" + std::to_string(i + 1), coarse, fine,
                                              1, 1, 0, seed);
    auto m = std::make_shared<nn::ConvBnRelu>(name + ".merge" + std::to_string(i + 1), fine, fine, 3,
                                              1, 1, seed);
    reduce_.push_back(r);
    merge_.push_back(m);
    register_child(r);
    register_child(m);
  }
}

FeaturePyramid NlFpn::forward(const FeaturePyramid& p) {
  p.validate();
  const Var& p2 = p.levels[0].value;
  const Var& p4 = p.levels[1].value;
  const Var& p8 = p.levels[2].value;
  const Var& p16 = p.levels[3].value;

  Var m16 = nl16_ ? add(p16, nl16_->forward(p16)) : p16;

  Var t3 = merge_[0]->forward(add(reduce_[0]->forward(upsample_nearest2(m16)), p8));
  if (nl8_) t3 = nl8_->forward(t3);
  Var m8 = add(p8, t3);

  Var t2 = merge_[1]->forward(add(reduce_[1]->forward(upsample_nearest2(m8)), p4));
  Var m4 = add(p4, t2);

  Var t1 = merge_[2]->forward(add(reduce_[2]->forward(upsample_nearest2(m4)), p2));
  Var m2 = add(p2, t1);

  FeaturePyramid out;
  out.levels = {{m2, 2}, {m4, 4}, {m8, 8}, {m16, 16}};
  return out;
}

DenseStream::DenseStream(const std::string& name, int in_ch, int width, int depth, std::uint64_t seed) {
  if (depth < 1) throw std::invalid_argument("dense stream needs depth >= 1");
  for (int i = 0; i < depth; ++i) {
    auto c = std::make_shared<nn::Conv2d>(name + ".conv" + std::to_string(i + 1),
                                          i == 0 ? in_ch : width, width, 3, 1, 1, true, seed);
    convs_.push_back(c);
    register_child(c);
  }
}

Var DenseStream::forward(const Var& x) const {
  Var acc = relu(convs_[0]->forward(x));  // first stage projects to stream width
  Var out = acc;
  for (std::size_t i = 1; i < convs_.size(); ++i) {
    Var next = relu(convs_[i]->forward(acc));
    out = add(out, next);
    acc = add(acc, next);  // dense: each stage sees the sum of all previous
  }
  return out;
}

DenseFusion::DenseFusion(const std::string& name, int channels, int stream_depth, std::uint64_t seed) {
  if (channels % 2 != 0) throw std::invalid_argument("dfm: channel count must be even");
  const int width = channels / 2;
  sum_stream_ = std::make_shared<DenseStream>(name + ".sum_stream", channels, width, stream_depth, seed);
  diff_stream_ = std::make_shared<DenseStream>(name + ".diff_stream", channels, width, stream_depth, seed);
  fuse_ = std::make_shared<nn::ConvBnRelu>(name + ".fuse", channels, channels, 3, 1, 1, seed);
  register_child(sum_stream_);
  register_child(diff_stream_);
  register_child(fuse_);
}

std::pair<Var, Var> DenseFusion::branch_outputs(const Var& f1, const Var& f2) const {
  if (f1.shape() != f2.shape())
    throw std::invalid_argument("dfm: shape mismatch " + shape_str(f1.shape()) + " vs " +
                                shape_str(f2.shape()));
  Var sum_out = add(sum_stream_->forward(f1), sum_stream_->forward(f2));
  Var diff_out = vabs(sub(diff_stream_->forward(f1), diff_stream_->forward(f2)));
  return {sum_out, diff_out};
}

Var DenseFusion::forward(const Var& f1, const Var& f2) {
  auto [sum_out, diff_out] = branch_outputs(f1, f2);
  return fuse_->forward(concat_channels({sum_out, diff_out}));
}

}  // namespace fccdn
