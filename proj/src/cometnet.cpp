#include "comet/cometnet.hpp"

#include <cmath>
#include <random>
#include <set>

namespace comet {

void NetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("NetConfig: " + m); };
  if (input_size <= 0 || input_size % kSemanticStride != 0) {
    fail("input_size must be a positive multiple of 16, got " + std::to_string(input_size));
  }
  if (spatial_channels < 1 || semantic_channels < 1 || fused_channels < 1 || head_hidden < 1) {
    fail("channel widths must be positive");
  }
  if (bam_dilation < 1) fail("bam_dilation must be >= 1");
  if (ref_bins < 1) fail("ref_bins must be >= 1");
  if (test_bins != 5) fail("test_bins is fixed at 5");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail("leaky_slope must be in [0, 1)");
}

nlohmann::json NetConfig::to_json() const {
  return {{"input_size", input_size},
          {"spatial_channels", spatial_channels},
          {"semantic_channels", semantic_channels},
          {"fused_channels", fused_channels},
          {"bam_dilation", bam_dilation},
          {"ref_bins", ref_bins},
          {"test_bins", test_bins},
          {"head_hidden", head_hidden},
          {"enable_bam", enable_bam},
          {"enable_cle_head", enable_cle_head},
          {"leaky_slope", leaky_slope}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("NetConfig: expected a JSON object");
  NetConfig c;
  const nlohmann::json defaults = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw std::invalid_argument("NetConfig: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("input_size", c.input_size);
  get("spatial_channels", c.spatial_channels);
  get("semantic_channels", c.semantic_channels);
  get("fused_channels", c.fused_channels);
  get("bam_dilation", c.bam_dilation);
  get("ref_bins", c.ref_bins);
  get("test_bins", c.test_bins);
  get("head_hidden", c.head_hidden);
  get("enable_bam", c.enable_bam);
  get("enable_cle_head", c.enable_cle_head);
  get("leaky_slope", c.leaky_slope);
  c.validate();
  return c;
}

NetConfig NetConfig::tiny() {
  NetConfig c;
  c.input_size = 48;
  c.spatial_channels = 8;
  c.semantic_channels = 16;
  c.fused_channels = 8;
  c.head_hidden = 16;
  return c;
}

NetConfig NetConfig::desk() {
  NetConfig c;
  c.input_size = 144;
  c.spatial_channels = 16;
  c.semantic_channels = 32;
  c.fused_channels = 16;
  c.head_hidden = 64;
  return c;
}

namespace net {

using namespace comet::ad;

namespace {

int stem_width(const NetConfig& c) { return std::max(1, c.spatial_channels / 2); }
int path_width(const NetConfig& c) { return std::max(1, c.fused_channels / 4); }
int bam_width(const NetConfig& c) { return std::max(1, c.fused_channels / 4); }

template <typename T>
class Initializer {
 public:
  Initializer(ParamStore<T>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void weight(const std::string& name, Shape shape, int fan_in, double gain = 2.0) {
    Tensor<T>& w = store_.add(name, std::move(shape));
    std::normal_distribution<double> n(0.0, std::sqrt(gain / fan_in));
    for (auto& v : w.values()) v = static_cast<T>(n(rng_));
  }
  void bias(const std::string& name, int n) { store_.add(name, {n}); }

  void conv(const std::string& name, int ci, int co, int kh, int kw, bool with_bias = true, double gain = 2.0) {
    weight(name + ".w", {co, ci, kh, kw}, ci * kh * kw, gain);
    if (with_bias) bias(name + ".b", co);
  }
  void bn(const std::string& name, int c) {
    store_.add(name + ".bn.gamma", {c}).fill(T{1});
    store_.add(name + ".bn.beta", {c});
    store_.add_buffer(name + ".bn.mean", {c}, T{0});
    store_.add_buffer(name + ".bn.var", {c}, T{1});
  }
  void conv_bn(const std::string& name, int ci, int co, int k) {
    conv(name, ci, co, k, k, false);
    bn(name, co);
  }

 private:
  ParamStore<T>& store_;
  Rng rng_;
};

}  // namespace

template <typename T>
ParamStore<T> init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<T> store;
  Initializer<T> init(store, seed);
  const int c0 = stem_width(cfg), c8 = cfg.spatial_channels, c16 = cfg.semantic_channels;
  const int cf = cfg.fused_channels, q = path_width(cfg), r = bam_width(cfg);

  init.conv_bn("backbone.stem", 3, c0, 3);
  const int stage_in[3] = {c0, c0, c8};
  const int stage_out[3] = {c0, c8, c16};
  for (int s = 0; s < 3; ++s) {
    const std::string n = "backbone.stage" + std::to_string(s + 1);
    init.conv_bn(n + ".conv1", stage_in[s], stage_out[s], 3);
    init.conv_bn(n + ".conv2", stage_out[s], stage_out[s], 3);
  }

  init.conv("msaf.p1", c8, q, 1, 1);
  init.conv("msaf.p2a", c8, q, 1, 1);
  init.conv("msaf.p2b", q, q, 1, 3);
  init.conv("msaf.p2c", q, q, 3, 1);
  init.conv("msaf.p3a", c8, q, 1, 1);
  init.conv("msaf.p3b", q, q, 1, 5);
  init.conv("msaf.p3c", q, q, 5, 1);
  init.conv("msaf.p4", c8, q, 1, 1);
  init.conv("msaf.proj", 4 * q, cf, 1, 1, true, 1.0);
  init.conv("msaf.sem", c16, cf, 1, 1);
  init.weight("msaf.up.w", {cf, cf, 3, 3}, cf * 9 / 4, 1.0);
  init.bias("msaf.up.b", cf);
  init.conv_bn("msaf.fuse", cf, cf, 1);

  init.weight("bam.fc1.w", {r, cf}, cf);
  init.bias("bam.fc1.b", r);
  init.weight("bam.fc2.w", {cf, r}, r, 1.0);
  init.bias("bam.fc2.b", cf);
  init.conv("bam.sp0", cf, r, 1, 1);
  init.conv("bam.sp1", r, r, 3, 3);
  init.conv("bam.sp2", r, r, 3, 3);
  init.conv("bam.sp3", r, 1, 1, 1, true, 1.0);

  init.conv_bn("mod.conv", cf, cf, cfg.ref_bins);

  const int flat = cf * cfg.test_bins * cfg.test_bins;
  init.weight("head.fc.w", {cfg.head_hidden, flat}, flat);
  init.bn("head.fc", cfg.head_hidden);
  init.weight("head.iou.w", {1, cfg.head_hidden}, cfg.head_hidden, 1.0);
  init.bias("head.iou.b", 1);
  init.weight("head.cle.w", {2, cfg.head_hidden}, cfg.head_hidden, 1.0);
  init.bias("head.cle.b", 2);
  return store;
}

template <typename T>
CometNet<T>::CometNet(NetConfig cfg, ParamStore<T>& params) : cfg_(cfg), params_(params) {
  cfg_.validate();
  const ParamStore<T> reference = init_params<T>(cfg_, 0);
  for (const auto& e : reference.entries()) {
    if (!params_.contains(e.name)) throw std::invalid_argument("CometNet: missing parameter " + e.name);
    if (params_.value(e.name).shape() != e.value.shape()) {
      throw ShapeError("CometNet: parameter " + e.name + " has shape " +
                       shape_str(params_.value(e.name).shape()) + ", expected " + shape_str(e.value.shape()));
    }
  }
}

template <typename T>
Var CometNet<T>::conv(Graph<T>& g, Var x, const std::string& name, const Conv2dSpec& spec, bool bias) const {
  return conv2d(g, x, p(g, name + ".w"), bias ? p(g, name + ".b") : Var{}, spec);
}

template <typename T>
Var CometNet<T>::bn(Graph<T>& g, Var x, const std::string& name) const {
  BatchNormState<T> st{&params_.value(name + ".bn.mean"), &params_.value(name + ".bn.var")};
  return batch_norm(g, x, p(g, name + ".bn.gamma"), p(g, name + ".bn.beta"), st);
}

template <typename T>
Var CometNet<T>::conv_bn_act(Graph<T>& g, Var x, const std::string& name, const Conv2dSpec& spec) const {
  return act(g, bn(g, conv(g, x, name, spec, false), name));
}

template <typename T>
FeaturePair CometNet<T>::backbone(Graph<T>& g, Var image) const {
  const Shape s = g.shape(image);
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.input_size || s[3] != cfg_.input_size) {
    throw ShapeError("backbone: expected [B,3," + std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "], got " + shape_str(s));
  }
  Var x = affine(g, image, 2.0, -1.0);
  x = conv_bn_act(g, x, "backbone.stem", Conv2dSpec::strided(3, 2));
  Var taps[3];
  for (int st = 0; st < 3; ++st) {
    const std::string n = "backbone.stage" + std::to_string(st + 1);
    x = conv_bn_act(g, x, n + ".conv1", Conv2dSpec::strided(3, 2));
    x = conv_bn_act(g, x, n + ".conv2", Conv2dSpec::same(3, 3));
    taps[st] = x;
  }
  return {taps[1], taps[2]};
}

template <typename T>
Var CometNet<T>::msaf(Graph<T>& g, const FeaturePair& fp) const {
  auto cba = [&](Var x, const std::string& n, Conv2dSpec spec) { return act(g, conv(g, x, n, spec)); };
  const Var s = fp.spatial;
  const Var p1 = cba(s, "msaf.p1", {});
  const Var p2 = cba(cba(cba(s, "msaf.p2a", {}), "msaf.p2b", Conv2dSpec::same(1, 3)), "msaf.p2c",
                     Conv2dSpec::same(3, 1));
  const Var p3 = cba(cba(cba(s, "msaf.p3a", {}), "msaf.p3b", Conv2dSpec::same(1, 5)), "msaf.p3c",
                     Conv2dSpec::same(5, 1));
  const Var p4 = cba(avg_pool2d(g, s, 3, 1, 1), "msaf.p4", {});
  const Var spatial = conv(g, concat_channels(g, {p1, p2, p3, p4}), "msaf.proj", {});

  const Var sem = act(g, conv(g, fp.semantic, "msaf.sem", {}));
  const Var up = deconv2d(g, sem, p(g, "msaf.up.w"), p(g, "msaf.up.b"), Deconv2dSpec{});
  if (g.shape(up) != g.shape(spatial)) {
    throw ShapeError("msaf: upsampled semantic branch " + shape_str(g.shape(up)) +
                     " does not match spatial branch " + shape_str(g.shape(spatial)));
  }
  return conv_bn_act(g, add(g, spatial, up), "msaf.fuse", {});
}

template <typename T>
Var CometNet<T>::bam(Graph<T>& g, Var feat) const {
  const Shape s = g.shape(feat);
  if (s.size() != 4 || s[1] != cfg_.fused_channels) {
    throw ShapeError("bam: expected [B," + std::to_string(cfg_.fused_channels) + ",H,W], got " + shape_str(s));
  }
  Var mc = act(g, linear(g, global_avg_pool(g, feat), p(g, "bam.fc1.w"), p(g, "bam.fc1.b")));
  mc = linear(g, mc, p(g, "bam.fc2.w"), p(g, "bam.fc2.b"));
  const Conv2dSpec dil = Conv2dSpec::same(3, 3, cfg_.bam_dilation);
  Var ms = act(g, conv(g, feat, "bam.sp0", {}));
  ms = act(g, conv(g, ms, "bam.sp1", dil));
  ms = act(g, conv(g, ms, "bam.sp2", dil));
  ms = conv(g, ms, "bam.sp3", {});
  const Var logits = add(g, expand_channels(g, mc, s[2], s[3]), expand_spatial(g, ms, s[1]));
  return mul(g, feat, affine(g, sigmoid(g, logits), 1.0, 1.0));
}

template <typename T>
Var CometNet<T>::features(Graph<T>& g, Var image) const {
  Var f = msaf(g, backbone(g, image));
  return cfg_.enable_bam ? bam(g, f) : f;
}

namespace {

void require_boxes(const Shape& s, const char* op) {
  if (s.size() != 2 || s[1] != 4 || s[0] < 1) {
    throw ContractError(std::string(op) + ": expected a non-empty [K,4] box tensor, got " + shape_str(s));
  }
}

}  // namespace

template <typename T>
Var CometNet<T>::reference_modulation(Graph<T>& g, Var ref_feat, Var boxes, const std::vector<int>& batch) const {
  require_boxes(g.shape(boxes), "reference_modulation");
  const int m = g.shape(boxes)[0];
  if (static_cast<int>(batch.size()) != m) throw ContractError("reference_modulation: batch index count mismatch");
  std::vector<RoiRef> rois;
  for (int i = 0; i < m; ++i) rois.push_back({batch[static_cast<std::size_t>(i)], i});
  const Var fboxes = affine(g, boxes, 1.0 / NetConfig::kSpatialStride, 0.0);
  const Var pooled = prroi_pool(g, ref_feat, fboxes, rois, cfg_.ref_bins, cfg_.ref_bins);
  const Var v = conv_bn_act(g, pooled, "mod.conv", {});
  return reshape(g, v, {m, cfg_.fused_channels});
}

template <typename T>
GroupedOutput CometNet<T>::grouped_heads(Graph<T>& g, Var test_feat, Var mods, Var test_boxes,
                                         const GroupLayout& layout) const {
  const Shape fs = g.shape(test_feat);
  const Shape ms = g.shape(mods);
  require_boxes(g.shape(test_boxes), "grouped_heads");
  if (ms.size() != 2 || ms[0] < 1 || ms[1] != cfg_.fused_channels) {
    throw ContractError("grouped_heads: expected non-empty [R," + std::to_string(cfg_.fused_channels) +
                        "] modulation, got " + shape_str(ms));
  }
  const int groups = ms[0], n = layout.boxes_per_map;
  if (static_cast<int>(layout.map_of_group.size()) != groups || n < 1) {
    throw ContractError("grouped_heads: group layout does not match modulation rows");
  }
  for (int mi : layout.map_of_group) {
    if (mi < 0 || mi >= fs[0] || (mi + 1) * n > g.shape(test_boxes)[0]) {
      throw ContractError("grouped_heads: group refers to a missing test map or box range");
    }
  }

  const Var modulated = mul(g, gather_rows(g, test_feat, layout.map_of_group), expand_channels(g, mods, fs[2], fs[3]));
  std::vector<RoiRef> rois;
  rois.reserve(static_cast<std::size_t>(groups) * n);
  for (int r = 0; r < groups; ++r) {
    for (int i = 0; i < n; ++i) rois.push_back({r, layout.map_of_group[static_cast<std::size_t>(r)] * n + i});
  }
  const int b = cfg_.test_bins;
  const Var fboxes = affine(g, test_boxes, 1.0 / NetConfig::kSpatialStride, 0.0);
  Var x = prroi_pool(g, modulated, fboxes, rois, b, b);
  const int rows = groups * n;
  x = reshape(g, x, {rows, cfg_.fused_channels * b * b});
  x = act(g, bn(g, linear(g, x, p(g, "head.fc.w"), Var{}), "head.fc"));

  GroupedOutput out;
  out.iou = reshape(g, linear(g, x, p(g, "head.iou.w"), p(g, "head.iou.b")), {groups, n});
  if (cfg_.enable_cle_head) {
    out.cle = reshape(g, linear(g, x, p(g, "head.cle.w"), p(g, "head.cle.b")), {groups, n, 2});
  } else {
    out.cle = g.constant(Tensor<T>({groups, n, 2}));
  }
  return out;
}

template <typename T>
GroupedOutput CometNet<T>::forward(Graph<T>& g, Var ref_image, Var test_image, Var ref_boxes,
                                   Var test_boxes) const {
  require_boxes(g.shape(ref_boxes), "forward");
  require_boxes(g.shape(test_boxes), "forward");
  const int m = g.shape(ref_boxes)[0], n = g.shape(test_boxes)[0];
  const Var rf = features(g, ref_image);
  const Var tf = features(g, test_image);
  const Var mods = reference_modulation(g, rf, ref_boxes, std::vector<int>(static_cast<std::size_t>(m), 0));
  return grouped_heads(g, tf, mods, test_boxes, GroupLayout::single_map(m, n));
}

template <typename T>
Tensor<T> box_tensor(const std::vector<BoxXYWH>& boxes) {
  Tensor<T> t({static_cast<int>(boxes.size()), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t[4 * i] = static_cast<T>(boxes[i].x);
    t[4 * i + 1] = static_cast<T>(boxes[i].y);
    t[4 * i + 2] = static_cast<T>(boxes[i].w);
    t[4 * i + 3] = static_cast<T>(boxes[i].h);
  }
  return t;
}

template ParamStore<float> init_params<float>(const NetConfig&, std::uint64_t);
template ParamStore<double> init_params<double>(const NetConfig&, std::uint64_t);
template class CometNet<float>;
template class CometNet<double>;
template Tensor<float> box_tensor<float>(const std::vector<BoxXYWH>&);
template Tensor<double> box_tensor<double>(const std::vector<BoxXYWH>&);
template ParamStore<long double> init_params<long double>(const NetConfig&, std::uint64_t);
template class CometNet<long double>;
template Tensor<long double> box_tensor<long double>(const std::vector<BoxXYWH>&);

}  // namespace net
}  // namespace comet
