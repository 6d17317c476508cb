#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include <json.hpp>

#include "comet/autodiff.hpp"
#include "comet/boxgeom.hpp"
#include "comet/cometnet.hpp"
#include "comet/dataset.hpp"
#include "comet/params.hpp"

namespace comet {

struct SamplePairConfig {
  int max_frame_gap = 50;
  double area_factor = 5.0;
  int out_size = 288;
  int n_test = 16;
  int n_ref = 8;  // ground truth + generated
  JitterConfig ref_jitter = JitterConfig::reference();
  JitterConfig test_jitter = JitterConfig::test();
  // Test-crop perturbation: center offset std as a fraction of sqrt(w*h),
  // and std of the log side length.
  double center_jitter = 0.25;
  double scale_jitter = 0.1;

  void validate() const;
};

struct SamplePair {
  Tensor<float> ref_patch;   // [3, S, S]
  Tensor<float> test_patch;  // [3, S, S]
  std::vector<BoxXYWH> ref_boxes;   // patch coordinates, ground truth first
  std::vector<bool> ref_exhausted;  // per ref box; the ground truth is never exhausted
  std::vector<BoxXYWH> test_boxes;  // patch coordinates
  BoxXYWH test_gt;                  // patch coordinates
  std::vector<double> iou_targets;              // 2 * IoU - 1
  std::vector<std::array<double, 2>> cle_targets;  // clamped to [-1, 1]
  int ref_frame = -1;
  int test_frame = -1;
};

inline double normalize_iou(double v) { return 2.0 * v - 1.0; }
inline double denormalize_iou(double t) { return (t + 1.0) / 2.0; }

/// Crops both frames, draws proposals and computes targets. The test crop is
/// centered on a perturbed copy of test_gt.
SamplePair make_sample_pair(const Image& ref_frame, const BoxXYWH& ref_gt, const Image& test_frame,
                            const BoxXYWH& test_gt, Rng& rng, const SamplePairConfig& cfg);

/// Picks two frames at most max_frame_gap apart and calls make_sample_pair.
SamplePair build_sample_pair(const SequenceRecord& seq, Rng& rng, const SamplePairConfig& cfg);

/// Horizontal flip (x' = S - x - w) and per-channel brightness, values clamped to [0, 1].
void apply_reference_augmentation(Tensor<float>& patch, std::vector<BoxXYWH>& boxes, bool flip,
                                  const std::array<double, 3>& brightness);
/// Flip with probability 0.5, brightness factors uniform in [0.9, 1.1].
void augment_reference(Tensor<float>& patch, std::vector<BoxXYWH>& boxes, Rng& rng);

struct LossConfig {
  double lambda = 4.0;
  void validate() const;
};

double smooth_l1_value(double d);

struct LossTerms {
  ad::Var total;
  ad::Var l_iou;
  ad::Var l_cle;
};

/// iou_targets: [R, N]; cle_targets: [R, N, 2].
template <typename T>
LossTerms multitask_loss(ad::Graph<T>& g, const net::GroupedOutput& pred, const Tensor<T>& iou_targets,
                         const Tensor<T>& cle_targets, const LossConfig& cfg);

/// A batch of pairs laid out for one grouped forward pass.
struct Batch {
  Tensor<float> ref_images;   // [B, 3, S, S]
  Tensor<float> test_images;  // [B, 3, S, S]
  Tensor<float> ref_boxes;    // [B * n_ref, 4]
  Tensor<float> test_boxes;   // [B * n_test, 4]
  std::vector<int> ref_batch;
  net::GroupLayout layout;
  Tensor<float> iou_targets;  // [B * n_ref, n_test]
  Tensor<float> cle_targets;  // [B * n_ref, n_test, 2]
};

Batch collate(const std::vector<SamplePair>& pairs);

/// Grouped forward pass over a collated batch.
net::GroupedOutput forward_batch(ad::Graph<float>& g, const net::CometNet<float>& net, const Batch& batch);

struct TrainConfig {
  int steps = 60000;
  int batch_size = 64;
  int steps_per_epoch = 1000;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double lr_decay = 0.2;
  int decay_every_epochs = 15;
  double lambda = 4.0;
  std::uint64_t seed = 1;
  bool augment = true;
  bool overfit = false;  // reuse one fixed batch every step
  SamplePairConfig pairs;

  static TrainConfig desk();
  void validate() const;
  double lr_at(int step) const;
  nlohmann::json to_json() const;
  /// Requires schema_version; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double l_iou = 0.0;
  double l_cle = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ParamStore<float> params;
  std::vector<TrainLogRow> log;
};

/// Deterministic given cfg.seed. progress (optional) receives one line per epoch.
TrainResult train(const std::vector<SequenceRecord>& data, const NetConfig& net_cfg, const TrainConfig& cfg,
                  std::ostream* progress = nullptr);

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log);

}  // namespace comet
