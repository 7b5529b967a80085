#pragma once

#include <map>
#include <optional>
#include <string>

#include "fccdn/blocks.hpp"

namespace fccdn {

enum class Backbone { kFcs, kDed };

std::string backbone_name(Backbone b);
Backbone backbone_from_name(const std::string& s);

struct NetworkConfig {
  Backbone backbone = Backbone::kDed;
  double width_multiplier = 1.0;
  bool use_nl_fpn = true;
  bool use_dfm = true;
  bool use_ssl_heads = true;
  int num_seg_classes = 1;  // 1 = binary
  int input_channels = 3;
  std::vector<int> base_widths{32, 64, 128, 256};
  std::vector<int> stage_blocks{1, 1, 1, 2};
  int se_ratio = 16;
  std::vector<int> nl_strides{16, 8};
  int nl_hw_cap = 4096;
  int dense_stream_convs = 3;
  std::uint64_t init_seed = 42;

  std::vector<int> widths() const;
  void validate() const;
};

/// FCCDN = DED backbone with NL-FPN, DFM fusion and SSL heads all enabled.
NetworkConfig fccdn_config(double width_multiplier = 1.0);
/// Plain fully convolutional Siamese baseline.
NetworkConfig fcs_config(double width_multiplier = 1.0);
/// Dual encoder-decoder backbone without the add-on mechanisms.
NetworkConfig ded_config(double width_multiplier = 1.0);

struct ModelOutputs {
  Var change_score;               // (N,1,H,W) in [0,1]
  std::optional<Var> seg1, seg2;  // (N,K,H,W); sigmoid scores or per-pixel simplex
  bool has_seg() const { return seg1.has_value() && seg2.has_value(); }
};

/// Named intermediate features recorded during a forward pass. Used by the
/// feature-magnitude export and by structural tests.
using FeatureTaps = std::map<std::string, Tensor>;

class ChangeDetectionModel : public nn::Module {
 public:
  explicit ChangeDetectionModel(NetworkConfig cfg);

  /// t1, t2: (N,C,H,W) with H, W divisible by 16.
  ModelOutputs forward(const Var& t1, const Var& t2, FeatureTaps* taps = nullptr);

  const NetworkConfig& config() const { return cfg_; }
  std::int64_t parameter_count(bool trainable_only = true) const;

  void train_mode() { set_training(true); }
  void eval_mode() { set_training(false); }

 private:
  FeaturePyramid encode(const Var& x);
  std::vector<Var> decode(const FeaturePyramid& p);  // DED dual-decoder features, fine->coarse
  Var fuse_level(int level, const Var& a, const Var& b);
  Var head(const nn::Conv2d& conv, const Var& x, bool multiclass) const;

  NetworkConfig cfg_;
  std::vector<std::shared_ptr<EncoderStage>> stages_;
  std::shared_ptr<NlFpn> nl_fpn_;
  std::vector<std::shared_ptr<CatFuse>> dual_decoder_;   // DED only; coarse->fine
  std::vector<std::shared_ptr<CatFuse>> cat_fusions_;    // per level when !use_dfm
  std::vector<std::shared_ptr<DenseFusion>> dfm_fusions_;  // per level when use_dfm
  std::vector<std::shared_ptr<CatFuse>> change_decoder_;   // coarse->fine
  std::shared_ptr<nn::Conv2d> change_head_, seg_head_;
};

}  // namespace fccdn
