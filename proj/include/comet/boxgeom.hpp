#pragma once

#include <array>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace comet {

class InvalidBox : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Axis-aligned box stored as top-left corner plus size, in pixels.
struct BoxXYWH {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double cx() const { return x + w / 2.0; }
  double cy() const { return y + h / 2.0; }
  double area() const { return w * h; }
  bool valid() const { return w > 0.0 && h > 0.0; }

  friend bool operator==(const BoxXYWH&, const BoxXYWH&) = default;
};

using Vec4 = std::array<double, 4>;
using Rng = std::mt19937_64;

/// Smallest width/height any jittered or refined box may take.
inline constexpr double kMinBoxSize = 1.0;

void require_valid(const BoxXYWH& b, const char* what);
std::string to_string(const BoxXYWH& b);

BoxXYWH clamp_min_size(BoxXYWH b, double min_size = kMinBoxSize);

/// Intersects b with the frame [0,width]x[0,height]; the result keeps at
/// least kMinBoxSize on each side and stays inside the frame.
BoxXYWH clamp_to_frame(const BoxXYWH& b, double width, double height);

double iou(const BoxXYWH& a, const BoxXYWH& b);

struct CenterOffset {
  double dx = 0.0;
  double dy = 0.0;
};

/// Center offset of p relative to gt, normalized by gt's size.
CenterOffset cle_normalized(const BoxXYWH& gt, const BoxXYWH& p);

/// Euclidean distance between box centers in pixels.
double center_error(const BoxXYWH& a, const BoxXYWH& b);

BoxXYWH gaussian_jitter(const BoxXYWH& b, const Vec4& sigma, Rng& rng);

struct JitterConfig {
  Vec4 mean{0.0, 0.0, 0.0, 0.0};
  // Each entry multiplies (w, h, w, h) of the source box.
  std::vector<Vec4> sigma_pool;
  double threshold = 0.1;
  int max_iter = 20;
  int count = 16;

  static std::vector<Vec4> default_sigma_pool();
  static JitterConfig reference();  // T2 = 0.8, 200 attempts, 7 proposals
  static JitterConfig test();       // T1 = 0.1, 20 attempts, 16 proposals
  void validate() const;
};

struct ProposalSet {
  std::vector<BoxXYWH> boxes;
  std::vector<bool> exhausted;
  BoxXYWH source;

  std::size_t exhausted_count() const;
};

/// Jitters `b` until each proposal clears cfg.threshold or cfg.max_iter draws
/// are spent. The last draw is kept and flagged when the budget runs out.
ProposalSet generate_proposals(const BoxXYWH& b, const JitterConfig& cfg, Rng& rng);

/// Square crop window centered on a box, resampled to out_size x out_size.
class CropSpec {
 public:
  CropSpec(const BoxXYWH& b, double area_factor = 5.0, int out_size = 288);
  CropSpec(double center_x, double center_y, double side, int out_size);

  double left() const { return left_; }
  double top() const { return top_; }
  double side() const { return side_; }
  int out_size() const { return out_size_; }
  /// Crop pixels per source pixel.
  double scale() const { return out_size_ / side_; }

  BoxXYWH to_crop(const BoxXYWH& b) const;
  BoxXYWH to_source(const BoxXYWH& b) const;

 private:
  double left_;
  double top_;
  double side_;
  int out_size_;
};

}  // namespace comet
