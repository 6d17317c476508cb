#pragma once

// Independent reference computations used by the verification suites. None
// of these share code with the implementations they check.

#include <algorithm>
#include <array>
#include <cstdint>

#include "comet/boxgeom.hpp"

namespace comet::oracle {

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;
};

/// IoU of integer boxes by counting covered unit cells.
inline Rational raster_iou(int ax, int ay, int aw, int ah, int bx, int by, int bw, int bh) {
  std::int64_t inter = 0;
  for (int y = ay; y < ay + ah; ++y) {
    if (y < by || y >= by + bh) continue;
    for (int x = ax; x < ax + aw; ++x) {
      if (x >= bx && x < bx + bw) ++inter;
    }
  }
  const std::int64_t uni = static_cast<std::int64_t>(aw) * ah + static_cast<std::int64_t>(bw) * bh - inter;
  return {inter, uni};
}

/// IoU of real boxes by coordinate compression: the plane is cut along every
/// box edge and each resulting cell is tested for membership.
inline long double sweep_iou(const BoxXYWH& a, const BoxXYWH& b) {
  using L = long double;
  std::array<L, 4> xs{a.x, a.x + a.w, b.x, b.x + b.w};
  std::array<L, 4> ys{a.y, a.y + a.h, b.y, b.y + b.h};
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  auto inside = [](const BoxXYWH& r, L x, L y) {
    return x > r.x && x < r.x + static_cast<L>(r.w) && y > r.y && y < r.y + static_cast<L>(r.h);
  };
  L inter = 0, uni = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const L cw = xs[i + 1] - xs[i], ch = ys[j + 1] - ys[j];
      if (cw <= 0 || ch <= 0) continue;
      const L mx = (xs[i] + xs[i + 1]) / 2, my = (ys[j] + ys[j + 1]) / 2;
      const bool in_a = inside(a, mx, my), in_b = inside(b, mx, my);
      if (in_a && in_b) inter += cw * ch;
      if (in_a || in_b) uni += cw * ch;
    }
  }
  return uni > 0 ? inter / uni : 0;
}

}  // namespace comet::oracle
