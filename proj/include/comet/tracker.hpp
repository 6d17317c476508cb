#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "comet/boxgeom.hpp"
#include "comet/cometnet.hpp"
#include "comet/image.hpp"
#include "comet/params.hpp"

namespace comet {

struct RefineConfig {
  double beta = 1.0;
  int n_steps = 5;
  int k_best = 3;
  int n_proposals = 10;
  // Proposal i is jittered with sigma factors[i % size] * (w, h, w, h).
  std::vector<double> jitter_factors{0.1, 0.2};
  double area_factor = 5.0;
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static RefineConfig from_json(const nlohmann::json& j);
};

/// b + beta * [gx * w, gy * h, gw * w, gh * h], then minimum-size clamp.
BoxXYWH apply_iou_step(const BoxXYWH& b, const Vec4& grad, double beta);
/// b - beta * [gx * w, gy * h, gw, gh], then minimum-size clamp.
BoxXYWH apply_cle_step(const BoxXYWH& b, const Vec4& grad, double beta);

/// Indices of the k largest scores, highest first; ties keep index order.
std::vector<std::size_t> top_k(const std::vector<double>& scores, int k);
/// Unweighted coordinate mean.
BoxXYWH mean_box(const std::vector<BoxXYWH>& boxes);

class EstimatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Coarse per-frame target location.
class RoughEstimator {
 public:
  virtual ~RoughEstimator() = default;
  virtual void init(const Image& frame0, const BoxXYWH& box0) = 0;
  /// Result is clamped to the frame.
  virtual BoxXYWH estimate(const Image& frame, int frame_index, const BoxXYWH& prev_box) = 0;
};

/// Ground truth plus fixed-seed Gaussian noise with std sigma_factor * (w, h, w, h).
class GtJitterEstimator : public RoughEstimator {
 public:
  GtJitterEstimator(std::vector<BoxXYWH> gt, double sigma_factor = 0.1, std::uint64_t seed = 11);
  void init(const Image&, const BoxXYWH&) override {}
  BoxXYWH estimate(const Image& frame, int frame_index, const BoxXYWH& prev_box) override;

 private:
  std::vector<BoxXYWH> gt_;
  double sigma_;
  Rng rng_;
};

/// Normalized cross-correlation of the grayscale first-frame template over a
/// window around the previous box, at scales {0.96, 1, 1.04}.
class NccEstimator : public RoughEstimator {
 public:
  explicit NccEstimator(double search_factor = 1.0) : search_factor_(search_factor) {}
  void init(const Image& frame0, const BoxXYWH& box0) override;
  BoxXYWH estimate(const Image& frame, int frame_index, const BoxXYWH& prev_box) override;

  /// Scale chosen by the last estimate.
  double last_scale() const { return last_scale_; }

 private:
  double search_factor_;
  std::vector<float> templ_;
  int tw_ = 0, th_ = 0;
  BoxXYWH inner_;  // target box inside the template
  double last_scale_ = 1.0;
};

/// gt_jitter | ncc
std::unique_ptr<RoughEstimator> make_estimator(const std::string& name, const std::vector<BoxXYWH>& gt,
                                               std::uint64_t seed);

struct RefineResult {
  std::vector<BoxXYWH> boxes;
  std::vector<double> scores;  // predicted IoU in [0, 1] scale
};

class Tracker {
 public:
  /// params is copied; the tracker never modifies it.
  Tracker(const NetConfig& net_cfg, const ParamStore<float>& params, RefineConfig cfg = {});
  Tracker(const Tracker&) = delete;
  Tracker& operator=(const Tracker&) = delete;

  void init(const Image& frame0, const BoxXYWH& gt_box, std::unique_ptr<RoughEstimator> estimator);
  BoxXYWH track_frame(const Image& frame);

  /// Feature map of one [3, S, S] patch, [1, C_f, S/8, S/8].
  Tensor<float> test_features(const Tensor<float>& patch) const;
  /// Predicted IoU ([0, 1] scale) and normalized center offsets for boxes in patch coordinates.
  struct Prediction {
    std::vector<double> iou;
    std::vector<std::array<double, 2>> cle;
  };
  Prediction predict(const Tensor<float>& feat, const std::vector<BoxXYWH>& boxes) const;
  /// Per-box gradients of the predicted IoU ([0, 1] scale) and of 0.5 * |cle|^2.
  void box_gradients(const Tensor<float>& feat, const std::vector<BoxXYWH>& boxes, std::vector<Vec4>* iou_grad,
                     std::vector<Vec4>* cle_grad) const;
  /// n_steps alternating IoU-ascent and CLE-descent updates, then a final scoring pass.
  RefineResult refine_boxes(const Tensor<float>& feat, std::vector<BoxXYWH> boxes) const;

  const Tensor<float>& modulation() const { return modulation_; }
  const RefineConfig& config() const { return cfg_; }
  int frame_index() const { return frame_index_; }
  const BoxXYWH& prev_box() const { return prev_box_; }
  /// Indices of frames whose refinement or estimation failed.
  const std::vector<int>& flagged_frames() const { return flagged_; }
  const std::vector<std::string>& flag_messages() const { return flag_messages_; }

 private:
  NetConfig net_cfg_;
  ParamStore<float> params_;
  std::unique_ptr<net::CometNet<float>> net_;
  RefineConfig cfg_;
  Rng rng_;
  std::unique_ptr<RoughEstimator> estimator_;
  Tensor<float> modulation_;  // [1, C_f]
  BoxXYWH prev_box_;
  int frame_index_ = -1;
  std::vector<int> flagged_;
  std::vector<std::string> flag_messages_;
};

}  // namespace comet
