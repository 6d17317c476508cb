#include "comet/boxgeom.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace comet {

void require_valid(const BoxXYWH& b, const char* what) {
  if (!(b.w > 0.0 && b.h > 0.0) || !std::isfinite(b.x) || !std::isfinite(b.y) ||
      !std::isfinite(b.w) || !std::isfinite(b.h)) {
    throw InvalidBox(std::string(what) + ": invalid box " + to_string(b));
  }
}

std::string to_string(const BoxXYWH& b) {
  std::ostringstream os;
  os << "(" << b.x << "," << b.y << "," << b.w << "," << b.h << ")";
  return os.str();
}

BoxXYWH clamp_min_size(BoxXYWH b, double min_size) {
  b.w = std::max(b.w, min_size);
  b.h = std::max(b.h, min_size);
  return b;
}

BoxXYWH clamp_to_frame(const BoxXYWH& b, double width, double height) {
  const double side_w = std::min(std::max(b.w, kMinBoxSize), width);
  const double side_h = std::min(std::max(b.h, kMinBoxSize), height);
  double x1 = std::clamp(b.x, 0.0, width - kMinBoxSize);
  double y1 = std::clamp(b.y, 0.0, height - kMinBoxSize);
  double x2 = std::clamp(b.x + side_w, x1 + kMinBoxSize, width);
  double y2 = std::clamp(b.y + side_h, y1 + kMinBoxSize, height);
  return {x1, y1, x2 - x1, y2 - y1};
}

double iou(const BoxXYWH& a, const BoxXYWH& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

CenterOffset cle_normalized(const BoxXYWH& gt, const BoxXYWH& p) {
  require_valid(gt, "cle_normalized");
  return {(gt.cx() - p.cx()) / gt.w, (gt.cy() - p.cy()) / gt.h};
}

double center_error(const BoxXYWH& a, const BoxXYWH& b) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

BoxXYWH gaussian_jitter(const BoxXYWH& b, const Vec4& sigma, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  BoxXYWH out = b;
  // Draw all four even for zero sigma so the stream position does not depend on sigma.
  const double e0 = n01(rng), e1 = n01(rng), e2 = n01(rng), e3 = n01(rng);
  out.x += sigma[0] * e0;
  out.y += sigma[1] * e1;
  out.w += sigma[2] * e2;
  out.h += sigma[3] * e3;
  return clamp_min_size(out);
}

std::vector<Vec4> JitterConfig::default_sigma_pool() {
  std::vector<Vec4> pool;
  for (double f : {0.05, 0.1, 0.2, 0.3, 0.5}) pool.push_back({f, f, f, f});
  return pool;
}

JitterConfig JitterConfig::reference() {
  JitterConfig c;
  c.sigma_pool = default_sigma_pool();
  c.threshold = 0.8;
  c.max_iter = 200;
  c.count = 7;
  return c;
}

JitterConfig JitterConfig::test() {
  JitterConfig c;
  c.sigma_pool = default_sigma_pool();
  c.threshold = 0.1;
  c.max_iter = 20;
  c.count = 16;
  return c;
}

void JitterConfig::validate() const {
  if (sigma_pool.empty()) throw std::invalid_argument("JitterConfig: empty sigma_pool");
  for (const auto& s : sigma_pool) {
    for (double v : s) {
      if (!(v >= 0.0)) throw std::invalid_argument("JitterConfig: negative sigma");
    }
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("JitterConfig: threshold outside [0,1]");
  }
  if (max_iter < 1) throw std::invalid_argument("JitterConfig: max_iter must be positive");
  if (count < 0) throw std::invalid_argument("JitterConfig: negative count");
}

std::size_t ProposalSet::exhausted_count() const {
  return static_cast<std::size_t>(std::count(exhausted.begin(), exhausted.end(), true));
}

ProposalSet generate_proposals(const BoxXYWH& b, const JitterConfig& cfg, Rng& rng) {
  require_valid(b, "generate_proposals");
  cfg.validate();
  ProposalSet set;
  set.source = b;
  set.boxes.reserve(cfg.count);
  set.exhausted.reserve(cfg.count);
  std::uniform_int_distribution<std::size_t> pick(0, cfg.sigma_pool.size() - 1);
  BoxXYWH shifted = b;
  shifted.x += cfg.mean[0];
  shifted.y += cfg.mean[1];
  shifted.w += cfg.mean[2];
  shifted.h += cfg.mean[3];
  for (int i = 0; i < cfg.count; ++i) {
    BoxXYWH p;
    double overlap = 0.0;
    int attempts = 0;
    do {
      const Vec4& f = cfg.sigma_pool[pick(rng)];
      p = gaussian_jitter(clamp_min_size(shifted), {f[0] * b.w, f[1] * b.h, f[2] * b.w, f[3] * b.h},
                          rng);
      overlap = iou(b, p);
      ++attempts;
    } while (overlap < cfg.threshold && attempts < cfg.max_iter);
    set.boxes.push_back(p);
    set.exhausted.push_back(overlap < cfg.threshold);
  }
  return set;
}

CropSpec::CropSpec(const BoxXYWH& b, double area_factor, int out_size) : out_size_(out_size) {
  require_valid(b, "crop_spec");
  if (!(area_factor > 0.0)) throw std::invalid_argument("crop_spec: area_factor must be > 0");
  if (out_size <= 0) throw std::invalid_argument("crop_spec: out_size must be > 0");
  side_ = area_factor * std::sqrt(b.w * b.h);
  left_ = b.cx() - side_ / 2.0;
  top_ = b.cy() - side_ / 2.0;
}

CropSpec::CropSpec(double center_x, double center_y, double side, int out_size)
    : left_(center_x - side / 2.0), top_(center_y - side / 2.0), side_(side), out_size_(out_size) {
  if (!(side > 0.0)) throw std::invalid_argument("crop_spec: side must be > 0");
  if (out_size <= 0) throw std::invalid_argument("crop_spec: out_size must be > 0");
}

BoxXYWH CropSpec::to_crop(const BoxXYWH& b) const {
  const double s = scale();
  return {(b.x - left_) * s, (b.y - top_) * s, b.w * s, b.h * s};
}

BoxXYWH CropSpec::to_source(const BoxXYWH& b) const {
  const double s = side_ / out_size_;
  return {b.x * s + left_, b.y * s + top_, b.w * s, b.h * s};
}

}  // namespace comet
