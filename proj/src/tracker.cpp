#include "comet/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace comet {

using ad::Graph;
using ad::Var;

void RefineConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("refine config: " + m); };
  if (!(beta >= 0)) fail("beta must be >= 0");
  if (n_steps < 0) fail("n_steps must be >= 0");
  if (n_proposals < 0) fail("n_proposals must be >= 0");
  if (k_best < 1 || k_best > n_proposals + 1) fail("k_best must be in [1, n_proposals + 1]");
  if (jitter_factors.empty()) fail("jitter_factors must not be empty");
  for (double f : jitter_factors) {
    if (!(f >= 0)) fail("jitter factors must be >= 0");
  }
  if (!(area_factor > 0)) fail("area_factor must be > 0");
}

nlohmann::json RefineConfig::to_json() const {
  return {{"beta", beta},         {"n_steps", n_steps},         {"k_best", k_best},
          {"n_proposals", n_proposals}, {"jitter_factors", jitter_factors}, {"area_factor", area_factor},
          {"seed", seed}};
}

RefineConfig RefineConfig::from_json(const nlohmann::json& j) {
  RefineConfig c;
  const nlohmann::json keys = c.to_json();
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw std::invalid_argument("refine config: unknown key '" + k + "'");
  }
  try {
    c.beta = j.value("beta", c.beta);
    c.n_steps = j.value("n_steps", c.n_steps);
    c.k_best = j.value("k_best", c.k_best);
    c.n_proposals = j.value("n_proposals", c.n_proposals);
    c.jitter_factors = j.value("jitter_factors", c.jitter_factors);
    c.area_factor = j.value("area_factor", c.area_factor);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("refine config: ") + e.what());
  }
  c.validate();
  return c;
}

BoxXYWH apply_iou_step(const BoxXYWH& b, const Vec4& grad, double beta) {
  return clamp_min_size({b.x + beta * grad[0] * b.w, b.y + beta * grad[1] * b.h, b.w + beta * grad[2] * b.w,
                         b.h + beta * grad[3] * b.h});
}

BoxXYWH apply_cle_step(const BoxXYWH& b, const Vec4& grad, double beta) {
  return clamp_min_size(
      {b.x - beta * grad[0] * b.w, b.y - beta * grad[1] * b.h, b.w - beta * grad[2], b.h - beta * grad[3]});
}

std::vector<std::size_t> top_k(const std::vector<double>& scores, int k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(std::max(k, 0))));
  return idx;
}

BoxXYWH mean_box(const std::vector<BoxXYWH>& boxes) {
  if (boxes.empty()) throw std::invalid_argument("mean_box: no boxes");
  BoxXYWH m{0, 0, 0, 0};
  for (const auto& b : boxes) {
    m.x += b.x;
    m.y += b.y;
    m.w += b.w;
    m.h += b.h;
  }
  const double n = static_cast<double>(boxes.size());
  return {m.x / n, m.y / n, m.w / n, m.h / n};
}

GtJitterEstimator::GtJitterEstimator(std::vector<BoxXYWH> gt, double sigma_factor, std::uint64_t seed)
    : gt_(std::move(gt)), sigma_(sigma_factor), rng_(seed) {
  if (!(sigma_factor >= 0)) throw std::invalid_argument("gt_jitter: sigma factor must be >= 0");
}

BoxXYWH GtJitterEstimator::estimate(const Image& frame, int frame_index, const BoxXYWH&) {
  if (frame_index < 0 || frame_index >= static_cast<int>(gt_.size())) {
    throw EstimatorError("gt_jitter: no ground truth for frame " + std::to_string(frame_index));
  }
  const BoxXYWH& g = gt_[static_cast<std::size_t>(frame_index)];
  const BoxXYWH b = gaussian_jitter(g, {sigma_ * g.w, sigma_ * g.h, sigma_ * g.w, sigma_ * g.h}, rng_);
  return clamp_to_frame(b, frame.width, frame.height);
}

namespace {

// Bilinear resample of the gray region [x, x+w) x [y, y+h) to ow x oh samples.
std::vector<float> resample(const std::vector<float>& gray, int gw, int gh, double x, double y, double w, double h,
                            int ow, int oh) {
  std::vector<float> out(static_cast<std::size_t>(ow) * oh);
  for (int v = 0; v < oh; ++v) {
    const double sy = std::clamp(y + (v + 0.5) * h / oh - 0.5, 0.0, gh - 1.0);
    const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, gh - 1);
    const double ty = sy - y0;
    for (int u = 0; u < ow; ++u) {
      const double sx = std::clamp(x + (u + 0.5) * w / ow - 0.5, 0.0, gw - 1.0);
      const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, gw - 1);
      const double tx = sx - x0;
      const auto at = [&](int xx, int yy) { return gray[static_cast<std::size_t>(yy) * gw + xx]; };
      const double top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * tx;
      const double bot = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * tx;
      out[static_cast<std::size_t>(v) * ow + u] = static_cast<float>(top + (bot - top) * ty);
    }
  }
  return out;
}

constexpr double kTemplateContext = 0.25;  // margin per side, fraction of the box size
constexpr double kNccScales[] = {0.96, 1.0, 1.04};

}  // namespace

void NccEstimator::init(const Image& frame0, const BoxXYWH& box0) {
  require_valid(box0, "ncc init");
  const BoxXYWH b = clamp_to_frame(box0, frame0.width, frame0.height);
  // Pixel-aligned template: the box plus a context margin, clipped to the frame.
  const int x0 = std::max(0, static_cast<int>(std::lround(b.x - kTemplateContext * b.w)));
  const int y0 = std::max(0, static_cast<int>(std::lround(b.y - kTemplateContext * b.h)));
  const int x1 = std::min(frame0.width, static_cast<int>(std::lround(b.x + b.w + kTemplateContext * b.w)));
  const int y1 = std::min(frame0.height, static_cast<int>(std::lround(b.y + b.h + kTemplateContext * b.h)));
  tw_ = std::max(1, x1 - x0);
  th_ = std::max(1, y1 - y0);
  inner_ = {b.x - x0, b.y - y0, b.w, b.h};
  const std::vector<float> gray = grayscale(frame0);
  templ_.resize(static_cast<std::size_t>(tw_) * th_);
  for (int y = 0; y < th_; ++y)
    for (int x = 0; x < tw_; ++x)
      templ_[static_cast<std::size_t>(y) * tw_ + x] = gray[static_cast<std::size_t>(y0 + y) * frame0.width + x0 + x];
}

BoxXYWH NccEstimator::estimate(const Image& frame, int, const BoxXYWH& prev) {
  if (templ_.empty()) throw EstimatorError("ncc: estimator not initialized");
  if (!prev.valid() || prev.cx() < 0 || prev.cy() < 0 || prev.cx() > frame.width || prev.cy() > frame.height) {
    throw EstimatorError("ncc: previous box " + to_string(prev) + " is outside the frame");
  }
  const int W = frame.width, H = frame.height;
  const std::vector<float> gray = grayscale(frame);
  // Integral images of intensity and squared intensity.
  std::vector<double> s1(static_cast<std::size_t>(W + 1) * (H + 1), 0.0), s2(s1.size(), 0.0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double v = gray[static_cast<std::size_t>(y) * W + x];
      const std::size_t i = static_cast<std::size_t>(y + 1) * (W + 1) + x + 1;
      s1[i] = v + s1[i - 1] + s1[i - (W + 1)] - s1[i - (W + 1) - 1];
      s2[i] = v * v + s2[i - 1] + s2[i - (W + 1)] - s2[i - (W + 1) - 1];
    }
  }
  auto rect = [&](const std::vector<double>& s, int x, int y, int w, int h) {
    const auto at = [&](int xx, int yy) { return s[static_cast<std::size_t>(yy) * (W + 1) + xx]; };
    return at(x + w, y + h) - at(x, y + h) - at(x + w, y) + at(x, y);
  };

  const double radius = search_factor_ * std::max(prev.w, prev.h);
  double best = -2.0;
  BoxXYWH best_box = prev;
  for (double s : kNccScales) {
    const int ww = std::clamp(static_cast<int>(std::lround(tw_ * s * prev.w / inner_.w)), 1, W);
    const int wh = std::clamp(static_cast<int>(std::lround(th_ * s * prev.h / inner_.h)), 1, H);
    std::vector<float> t = (ww == tw_ && wh == th_) ? templ_ : resample(templ_, tw_, th_, 0, 0, tw_, th_, ww, wh);
    const double n = static_cast<double>(ww) * wh;
    double tm = 0;
    for (float v : t) tm += v;
    tm /= n;
    double tv = 0;
    for (float& v : t) {
      v = static_cast<float>(v - tm);
      tv += static_cast<double>(v) * v;
    }
    const int xlo = std::max(0, static_cast<int>(std::floor(prev.cx() - radius - ww / 2.0)));
    const int xhi = std::min(W - ww, static_cast<int>(std::ceil(prev.cx() + radius - ww / 2.0)));
    const int ylo = std::max(0, static_cast<int>(std::floor(prev.cy() - radius - wh / 2.0)));
    const int yhi = std::min(H - wh, static_cast<int>(std::ceil(prev.cy() + radius - wh / 2.0)));
    for (int y = ylo; y <= yhi; ++y) {
      for (int x = xlo; x <= xhi; ++x) {
        double num = 0;
        for (int v = 0; v < wh; ++v) {
          const float* row = gray.data() + static_cast<std::size_t>(y + v) * W + x;
          const float* tr = t.data() + static_cast<std::size_t>(v) * ww;
          for (int u = 0; u < ww; ++u) num += static_cast<double>(row[u]) * tr[u];
        }
        const double a1 = rect(s1, x, y, ww, wh);
        const double av = rect(s2, x, y, ww, wh) - a1 * a1 / n;
        const double den = std::sqrt(std::max(av, 0.0) * tv);
        const double score = den > 1e-9 ? num / den : 0.0;
        if (score > best + 1e-12) {
          best = score;
          const double kx = static_cast<double>(ww) / tw_, ky = static_cast<double>(wh) / th_;
          best_box = {x + inner_.x * kx, y + inner_.y * ky, inner_.w * kx, inner_.h * ky};
          last_scale_ = s;
        }
      }
    }
  }
  return clamp_to_frame(best_box, W, H);
}

std::unique_ptr<RoughEstimator> make_estimator(const std::string& name, const std::vector<BoxXYWH>& gt,
                                               std::uint64_t seed) {
  if (name == "gt_jitter") return std::make_unique<GtJitterEstimator>(gt, 0.1, seed);
  if (name == "ncc") return std::make_unique<NccEstimator>();
  throw std::invalid_argument("unknown estimator '" + name + "' (gt_jitter, ncc)");
}

Tracker::Tracker(const NetConfig& net_cfg, const ParamStore<float>& params, RefineConfig cfg)
    : net_cfg_(net_cfg), params_(params), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  net_ = std::make_unique<net::CometNet<float>>(net_cfg_, params_);
}

Tensor<float> Tracker::test_features(const Tensor<float>& patch) const {
  Graph<float> g(false);
  const int s = net_cfg_.input_size;
  const Var f = net_->features(g, g.constant(patch.reshaped({1, 3, s, s})));
  return g.value(f);
}

void Tracker::init(const Image& frame0, const BoxXYWH& gt_box, std::unique_ptr<RoughEstimator> estimator) {
  require_valid(gt_box, "tracker init");
  if (!estimator) throw std::invalid_argument("tracker init: no rough estimator");
  const BoxXYWH b = clamp_to_frame(gt_box, frame0.width, frame0.height);
  const CropSpec crop(b, cfg_.area_factor, net_cfg_.input_size);
  const Tensor<float> feat = test_features(crop_patch(frame0, crop));
  Graph<float> g(false);
  const Var mods =
      net_->reference_modulation(g, g.constant(feat), g.constant(net::box_tensor<float>({crop.to_crop(b)})), {0});
  modulation_ = g.value(mods);
  estimator_ = std::move(estimator);
  estimator_->init(frame0, b);
  rng_.seed(cfg_.seed);
  prev_box_ = b;
  frame_index_ = 0;
  flagged_.clear();
  flag_messages_.clear();
}

Tracker::Prediction Tracker::predict(const Tensor<float>& feat, const std::vector<BoxXYWH>& boxes) const {
  Graph<float> g(false);
  const int n = static_cast<int>(boxes.size());
  const net::GroupedOutput out = net_->grouped_heads(g, g.constant(feat), g.constant(modulation_),
                                                     g.constant(net::box_tensor<float>(boxes)),
                                                     net::GroupLayout::single_map(1, n));
  Prediction p;
  const Tensor<float>& iou_t = g.value(out.iou);
  const Tensor<float>& cle_t = g.value(out.cle);
  for (int i = 0; i < n; ++i) {
    p.iou.push_back((static_cast<double>(iou_t[static_cast<std::size_t>(i)]) + 1.0) / 2.0);
    p.cle.push_back({cle_t[2 * static_cast<std::size_t>(i)], cle_t[2 * static_cast<std::size_t>(i) + 1]});
  }
  return p;
}

void Tracker::box_gradients(const Tensor<float>& feat, const std::vector<BoxXYWH>& boxes,
                            std::vector<Vec4>* iou_grad, std::vector<Vec4>* cle_grad) const {
  Graph<float> g(false);
  const int n = static_cast<int>(boxes.size());
  const Var bx = g.leaf(net::box_tensor<float>(boxes));
  const net::GroupedOutput out = net_->grouped_heads(g, g.constant(feat), g.constant(modulation_), bx,
                                                     net::GroupLayout::single_map(1, n));
  auto collect = [&](std::vector<Vec4>* dst) {
    const Tensor<float>& gr = g.grad(bx);
    dst->assign(boxes.size(), Vec4{0, 0, 0, 0});
    if (gr.size() == 0) return;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      for (int k = 0; k < 4; ++k) (*dst)[i][static_cast<std::size_t>(k)] = gr[4 * i + static_cast<std::size_t>(k)];
    }
  };
  if (iou_grad) {
    // d/dB of (t + 1) / 2 summed over boxes; each box only affects its own score.
    g.backward(ad::affine(g, ad::sum(g, out.iou), 0.5, 0.5));
    collect(iou_grad);
  }
  if (cle_grad) {
    g.zero_leaf_grads();
    g.backward(ad::affine(g, ad::sum(g, ad::square(g, out.cle)), 0.5, 0.0));
    collect(cle_grad);
  }
}

namespace {

bool finite(const std::vector<Vec4>& v) {
  for (const auto& a : v)
    for (double x : a)
      if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

RefineResult Tracker::refine_boxes(const Tensor<float>& feat, std::vector<BoxXYWH> boxes) const {
  if (frame_index_ < 0) throw std::logic_error("refine_boxes: tracker not initialized");
  if (boxes.empty()) throw std::invalid_argument("refine_boxes: no boxes");
  std::vector<Vec4> gi, gc;
  for (int it = 0; it < cfg_.n_steps; ++it) {
    box_gradients(feat, boxes, &gi, nullptr);
    if (!finite(gi)) throw std::runtime_error("refine_boxes: non-finite IoU gradient at step " + std::to_string(it));
    for (std::size_t i = 0; i < boxes.size(); ++i) boxes[i] = apply_iou_step(boxes[i], gi[i], cfg_.beta);
    if (net_cfg_.enable_cle_head) {
      box_gradients(feat, boxes, nullptr, &gc);
      if (!finite(gc)) throw std::runtime_error("refine_boxes: non-finite CLE gradient at step " + std::to_string(it));
      for (std::size_t i = 0; i < boxes.size(); ++i) boxes[i] = apply_cle_step(boxes[i], gc[i], cfg_.beta);
    }
  }
  RefineResult r;
  r.scores = predict(feat, boxes).iou;
  for (double s : r.scores) {
    if (!std::isfinite(s)) throw std::runtime_error("refine_boxes: non-finite IoU score");
  }
  r.boxes = std::move(boxes);
  return r;
}

BoxXYWH Tracker::track_frame(const Image& frame) {
  if (frame_index_ < 0) throw std::logic_error("track_frame: tracker not initialized");
  ++frame_index_;
  BoxXYWH est;
  try {
    est = clamp_to_frame(estimator_->estimate(frame, frame_index_, prev_box_), frame.width, frame.height);
  } catch (const EstimatorError& e) {
    flagged_.push_back(frame_index_);
    flag_messages_.push_back(e.what());
    return prev_box_;
  }
  std::vector<BoxXYWH> boxes{est};
  for (int i = 0; i < cfg_.n_proposals; ++i) {
    const double f = cfg_.jitter_factors[static_cast<std::size_t>(i) % cfg_.jitter_factors.size()];
    boxes.push_back(gaussian_jitter(est, {f * est.w, f * est.h, f * est.w, f * est.h}, rng_));
  }
  const CropSpec crop(est, cfg_.area_factor, net_cfg_.input_size);
  for (auto& b : boxes) b = crop.to_crop(b);
  BoxXYWH out;
  try {
    const RefineResult r = refine_boxes(test_features(crop_patch(frame, crop)), boxes);
    std::vector<BoxXYWH> best;
    for (std::size_t i : top_k(r.scores, cfg_.k_best)) best.push_back(r.boxes[i]);
    out = clamp_to_frame(crop.to_source(mean_box(best)), frame.width, frame.height);
  } catch (const std::runtime_error& e) {
    flagged_.push_back(frame_index_);
    flag_messages_.push_back(e.what());
    out = est;
  }
  prev_box_ = out;
  return out;
}

}  // namespace comet
