#include "fccdn/network.hpp"

#include <cmath>
#include <stdexcept>

namespace fccdn {

using namespace ops;

std::string backbone_name(Backbone b) { return b == Backbone::kFcs ? "fcs" : "ded"; }

Backbone backbone_from_name(const std::string& s) {
  if (s == "fcs") return Backbone::kFcs;
  if (s == "ded") return Backbone::kDed;
  throw std::invalid_argument("unknown backbone '" + s + "' (expected fcs or ded)");
}

std::vector<int> NetworkConfig::widths() const {
  std::vector<int> w;
  for (int base : base_widths) {
    double scaled = base * width_multiplier;
    int v = static_cast<int>(std::lround(scaled));
    if (std::fabs(scaled - v) > 1e-9)
      throw std::invalid_argument("width_multiplier " + std::to_string(width_multiplier) +
                                  " does not give integer channel counts");
    w.push_back(v);
  }
  return w;
}

void NetworkConfig::validate() const {
  if (width_multiplier <= 0) throw std::invalid_argument("width_multiplier must be positive");
  if (num_seg_classes < 1) throw std::invalid_argument("num_seg_classes must be >= 1");
  if (input_channels < 1) throw std::invalid_argument("input_channels must be >= 1");
  if (base_widths.size() != 4 || stage_blocks.size() != 4)
    throw std::invalid_argument("expected 4 encoder stages");
  for (int v : widths()) {
    if (v < 4) throw std::invalid_argument("channel width below 4 after scaling");
    if (v % 2 != 0) throw std::invalid_argument("channel widths must be even");
    SqueezeExcite::bottleneck_size(v, se_ratio);  // throws when the SE constraint fails
  }
  if (backbone == Backbone::kFcs && use_ssl_heads)
    throw std::invalid_argument("SSL heads require the dual decoder (DED backbone)");
}

NetworkConfig fccdn_config(double wm) {
  NetworkConfig c;
  c.backbone = Backbone::kDed;
  c.width_multiplier = wm;
  c.use_nl_fpn = true;
  c.use_dfm = true;
  c.use_ssl_heads = true;
  return c;
}

NetworkConfig fcs_config(double wm) {
  NetworkConfig c;
  c.backbone = Backbone::kFcs;
  c.width_multiplier = wm;
  c.use_nl_fpn = false;
  c.use_dfm = false;
  c.use_ssl_heads = false;
  return c;
}

NetworkConfig ded_config(double wm) {
  NetworkConfig c;
  c.backbone = Backbone::kDed;
  c.width_multiplier = wm;
  c.use_nl_fpn = false;
  c.use_dfm = false;
  c.use_ssl_heads = false;
  return c;
}

ChangeDetectionModel::ChangeDetectionModel(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto w = cfg_.widths();
  const std::uint64_t seed = cfg_.init_seed;

  int in_ch = cfg_.input_channels;
  for (int i = 0; i < 4; ++i) {
    auto st = std::make_shared<EncoderStage>("encoder.stage" + std::to_string(i + 1), in_ch, w[i],
                                             cfg_.stage_blocks[i], cfg_.se_ratio, seed);
    stages_.push_back(st);
    register_child(st);
    in_ch = w[i];
  }

  if (cfg_.use_nl_fpn) {
    NlFpnConfig fc;
    fc.channels = w;
    fc.nl_strides = cfg_.nl_strides;
    fc.hw_cap = cfg_.nl_hw_cap;
    nl_fpn_ = std::make_shared<NlFpn>("nl_fpn", fc, seed);
    register_child(nl_fpn_);
  }

  if (cfg_.backbone == Backbone::kDed) {
    // Coarse->fine: (up(16)+8)->8, (up(8)+4)->4, (up(4)+2)->2.
    for (int i = 0; i < 3; ++i) {
      auto blk = std::make_shared<CatFuse>("dual_decoder.block" + std::to_string(i + 1), w[3 - i],
                                           w[2 - i], w[2 - i], seed);
      dual_decoder_.push_back(blk);
      register_child(blk);
    }
  }

  for (int i = 0; i < 4; ++i) {
    const std::string nm = "fusion.level" + std::to_string(i + 1);
    if (cfg_.use_dfm) {
      auto f = std::make_shared<DenseFusion>(nm, w[i], cfg_.dense_stream_convs, seed);
      dfm_fusions_.push_back(f);
      register_child(f);
    } else {
      auto f = std::make_shared<CatFuse>(nm, w[i], w[i], w[i], seed);
      cat_fusions_.push_back(f);
      register_child(f);
    }
  }

  for (int i = 0; i < 3; ++i) {
    auto blk = std::make_shared<CatFuse>("change_decoder.block" + std::to_string(i + 1), w[3 - i],
                                         w[2 - i], w[2 - i], seed);
    change_decoder_.push_back(blk);
    register_child(blk);
  }

  change_head_ = std::make_shared<nn::Conv2d>("change_head", w[0], 1, 1, 1, 0, true, seed);
  register_child(change_head_);
  if (cfg_.use_ssl_heads) {
    seg_head_ = std::make_shared<nn::Conv2d>("seg_head", w[0], cfg_.num_seg_classes, 1, 1, 0, true, seed);
    register_child(seg_head_);
  }
}

FeaturePyramid ChangeDetectionModel::encode(const Var& x) {
  FeaturePyramid p;
  Var y = x;
  int stride = 1;
  for (auto& st : stages_) {
    y = st->forward(y);
    stride *= 2;
    p.levels.push_back({y, stride});
  }
  p.validate();
  return p;
}

std::vector<Var> ChangeDetectionModel::decode(const FeaturePyramid& p) {
  // Returns [d2, d4, d8, d16] (stride order), where d16 is the pyramid root.
  Var d16 = p.levels[3].value;
  Var d8 = dual_decoder_[0]->forward(d16, p.levels[2].value, true);
  Var d4 = dual_decoder_[1]->forward(d8, p.levels[1].value, true);
  Var d2 = dual_decoder_[2]->forward(d4, p.levels[0].value, true);
  return {d2, d4, d8, d16};
}

Var ChangeDetectionModel::fuse_level(int level, const Var& a, const Var& b) {
  if (cfg_.use_dfm) return dfm_fusions_[static_cast<std::size_t>(level)]->forward(a, b);
  return cat_fusions_[static_cast<std::size_t>(level)]->forward(a, b, false);
}

Var ChangeDetectionModel::head(const nn::Conv2d& conv, const Var& x, bool multiclass) const {
  Var logits = upsample_nearest2(conv.forward(x));
  return multiclass ? softmax_channels(logits) : sigmoid(logits);
}

ModelOutputs ChangeDetectionModel::forward(const Var& t1, const Var& t2, FeatureTaps* taps) {
  const auto& s1 = t1.shape();
  const auto& s2 = t2.shape();
  if (s1.size() != 4 || s2.size() != 4 || s1 != s2)
    throw std::invalid_argument("forward: expected two equal NCHW inputs");
  if (s1[1] != cfg_.input_channels)
    throw std::invalid_argument("forward: expected " + std::to_string(cfg_.input_channels) +
                                " input channels, got " + std::to_string(s1[1]));
  if (s1[2] % 16 != 0 || s1[3] % 16 != 0)
    throw std::invalid_argument("forward: input size " + shape_str(s1) +
                                " must be divisible by 16");

  auto tap = [&](const std::string& name, const Var& v) {
    if (taps) (*taps)[name] = v.value();
  };

  FeaturePyramid p1 = encode(t1);
  FeaturePyramid p2 = encode(t2);
  for (int i = 0; i < 4; ++i) {
    tap("enc1.s" + std::to_string(p1.levels[i].stride), p1.levels[i].value);
    tap("enc2.s" + std::to_string(p2.levels[i].stride), p2.levels[i].value);
  }

  if (nl_fpn_) {
    p1 = nl_fpn_->forward(p1);
    p2 = nl_fpn_->forward(p2);
  }

  std::vector<Var> f1, f2;  // per-temporal features feeding the fusions, stride order 2,4,8,16
  if (cfg_.backbone == Backbone::kDed) {
    f1 = decode(p1);
    f2 = decode(p2);
    for (int i = 0; i < 4; ++i) {
      tap("dec1.s" + std::to_string(2 << i), f1[static_cast<std::size_t>(i)]);
      tap("dec2.s" + std::to_string(2 << i), f2[static_cast<std::size_t>(i)]);
    }
  } else {
    for (int i = 0; i < 4; ++i) {
      f1.push_back(p1.levels[static_cast<std::size_t>(i)].value);
      f2.push_back(p2.levels[static_cast<std::size_t>(i)].value);
    }
  }

  std::vector<Var> change;  // stride order 2,4,8,16
  for (int i = 0; i < 4; ++i) {
    tap("fuse.s" + std::to_string(2 << i) + ".in1", f1[static_cast<std::size_t>(i)]);
    tap("fuse.s" + std::to_string(2 << i) + ".in2", f2[static_cast<std::size_t>(i)]);
    change.push_back(fuse_level(i, f1[static_cast<std::size_t>(i)], f2[static_cast<std::size_t>(i)]));
  }

  Var y = change[3];
  y = change_decoder_[0]->forward(y, change[2], true);
  y = change_decoder_[1]->forward(y, change[1], true);
  y = change_decoder_[2]->forward(y, change[0], true);
  tap("change.s2", y);

  ModelOutputs out;
  out.change_score = head(*change_head_, y, false);
  if (cfg_.use_ssl_heads) {
    out.seg1 = head(*seg_head_, f1[0], cfg_.num_seg_classes > 1);
    out.seg2 = head(*seg_head_, f2[0], cfg_.num_seg_classes > 1);
  }
  return out;
}

std::int64_t ChangeDetectionModel::parameter_count(bool trainable_only) const {
  std::int64_t n = 0;
  for (const auto& p : parameters())
    if (!trainable_only || p->trainable) n += p->value.numel();
  return n;
}

}  // namespace fccdn
