#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "comet/autodiff.hpp"
#include "comet/boxgeom.hpp"
#include "comet/params.hpp"

namespace comet {

struct NetConfig {
  int input_size = 288;
  int spatial_channels = 64;   // stride-8 map
  int semantic_channels = 128;  // stride-16 map
  int fused_channels = 64;
  int bam_dilation = 4;
  int ref_bins = 3;
  int test_bins = 5;
  int head_hidden = 256;
  bool enable_bam = true;
  bool enable_cle_head = true;
  double leaky_slope = 0.01;

  static constexpr int kSpatialStride = 8;
  static constexpr int kSemanticStride = 16;

  int spatial_side() const { return input_size / kSpatialStride; }
  int semantic_side() const { return input_size / kSemanticStride; }

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static NetConfig from_json(const nlohmann::json& j);

  static NetConfig tiny();  // 48 px, 8/16 channels, C_f 8
  static NetConfig desk();  // 144 px, 16/32 channels, C_f 16
};

namespace net {

struct FeaturePair {
  ad::Var spatial;
  ad::Var semantic;
};

/// iou: [R, N]; cle: [R, N, 2]. Row r belongs to modulation vector r.
struct GroupedOutput {
  ad::Var iou;
  ad::Var cle;
};

/// How modulation rows map to test maps and test boxes. Row r modulates test
/// map `map_of_group[r]` and is scored against test boxes
/// [map_of_group[r] * boxes_per_map, (map_of_group[r] + 1) * boxes_per_map).
struct GroupLayout {
  std::vector<int> map_of_group;
  int boxes_per_map = 0;

  static GroupLayout single_map(int groups, int boxes) {
    return {std::vector<int>(static_cast<std::size_t>(groups), 0), boxes};
  }
};

/// Variance-scaling (fan-in) initialization of a full parameter set for cfg.
template <typename T>
ParamStore<T> init_params(const NetConfig& cfg, std::uint64_t seed);

/// Two-stream network with a single parameter set shared by both streams.
template <typename T>
class CometNet {
 public:
  CometNet(NetConfig cfg, ParamStore<T>& params);

  const NetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }

  /// image: [B, 3, S, S] with values in [0, 1].
  FeaturePair backbone(ad::Graph<T>& g, ad::Var image) const;
  ad::Var msaf(ad::Graph<T>& g, const FeaturePair& fp) const;
  ad::Var bam(ad::Graph<T>& g, ad::Var feat) const;
  /// backbone -> msaf -> bam (bam skipped when disabled).
  ad::Var features(ad::Graph<T>& g, ad::Var image) const;

  /// boxes: [M, 4] in image pixels; batch[i] selects the map for row i.
  /// Returns [M, C_f].
  ad::Var reference_modulation(ad::Graph<T>& g, ad::Var ref_feat, ad::Var boxes,
                               const std::vector<int>& batch) const;

  /// mods: [R, C_f]; test_boxes: [maps * boxes_per_map, 4] in image pixels.
  GroupedOutput grouped_heads(ad::Graph<T>& g, ad::Var test_feat, ad::Var mods, ad::Var test_boxes,
                              const GroupLayout& layout) const;

  /// Single pair: ref_image and test_image [1, 3, S, S]; ref_boxes [M, 4];
  /// test_boxes [N, 4]. Output iou [M, N], cle [M, N, 2].
  GroupedOutput forward(ad::Graph<T>& g, ad::Var ref_image, ad::Var test_image, ad::Var ref_boxes,
                        ad::Var test_boxes) const;

 private:
  ad::Var conv(ad::Graph<T>& g, ad::Var x, const std::string& name, const ad::Conv2dSpec& spec,
               bool bias = true) const;
  ad::Var bn(ad::Graph<T>& g, ad::Var x, const std::string& name) const;
  ad::Var conv_bn_act(ad::Graph<T>& g, ad::Var x, const std::string& name, const ad::Conv2dSpec& spec) const;
  ad::Var act(ad::Graph<T>& g, ad::Var x) const { return ad::leaky_relu(g, x, cfg_.leaky_slope); }
  ad::Var p(ad::Graph<T>& g, const std::string& name) const { return g.param(params_, name); }

  NetConfig cfg_;
  ParamStore<T>& params_;
};

/// Packs boxes into a [K, 4] tensor.
template <typename T>
Tensor<T> box_tensor(const std::vector<BoxXYWH>& boxes);

}  // namespace net
}  // namespace comet
