// Bilinear sampling and precise RoI pooling.
//
// The interpolated map is f(x, y) = sum_{p,q} F[p][q] * tri(x - q) * tri(y - p)
// with tri(u) = max(0, 1 - |u|) and F zero outside the map. The kernel is
// separable, so the integral of f over a rectangle [x1,x2] x [y1,y2] is
//   sum_{p,q} F[p][q] * Iy(p) * Ix(q),   Ix(q) = P(x2 - q) - P(x1 - q)
// where P is the antiderivative of tri. Derivatives in the rectangle edges
// follow from dP/du = tri(u).

#include <algorithm>
#include <cmath>

#include "comet/autodiff.hpp"

namespace comet::ad {

namespace {

template <typename A>
inline A tri(A u) { return std::max(A{0}, 1 - std::abs(u)); }

// Antiderivative of tri, zero at -infinity.
template <typename A>
inline A tri_integral(A u) {
  if (u <= -1) return 0;
  if (u <= 0) return (u + 1) * (u + 1) / 2;
  if (u <= 1) return 1 - (1 - u) * (1 - u) / 2;
  return 1;
}

// Lattice cells whose kernel overlaps [a, b], clipped to [0, n).
struct CellRange {
  int lo, hi;  // inclusive
  bool empty() const { return lo > hi; }
};

template <typename A>
inline CellRange cells(A a, A b, int n) {
  return {std::max(0, static_cast<int>(std::floor(a))), std::min(n - 1, static_cast<int>(std::ceil(b)))};
}

// Edge weights of one bin along one axis.
template <typename A>
struct AxisWeights {
  CellRange range{0, -1};
  std::vector<A> w;     // integral of the kernel over [a, b] per cell
  std::vector<A> d_lo;  // derivative of w with respect to a
  std::vector<A> d_hi;  // derivative of w with respect to b
};

template <typename A>
void axis_weights(A a, A b, int n, AxisWeights<A>& out) {
  out.range = cells(a, b, n);
  const int len = out.range.empty() ? 0 : out.range.hi - out.range.lo + 1;
  out.w.assign(len, A{0});
  out.d_lo.assign(len, A{0});
  out.d_hi.assign(len, A{0});
  for (int k = 0; k < len; ++k) {
    const A q = out.range.lo + k;
    out.w[k] = tri_integral(b - q) - tri_integral(a - q);
    out.d_lo[k] = -tri(a - q);
    out.d_hi[k] = tri(b - q);
  }
}

}  // namespace

template <typename T>
Var bilinear_sample(Graph<T>& g, Var feat, Var points, const std::vector<int>& batch) {
  using A = Accum<T>;
  const Shape fs = g.shape(feat);
  const Shape ps = g.shape(points);
  if (fs.size() != 4) throw ShapeError("bilinear_sample: expected 4-d map, got " + shape_str(fs));
  if (ps.size() != 2 || ps[1] != 2) {
    throw ShapeError("bilinear_sample: expected points [P,2], got " + shape_str(ps));
  }
  const int np = ps[0], c = fs[1], h = fs[2], w = fs[3];
  if (static_cast<int>(batch.size()) != np) throw ShapeError("bilinear_sample: batch index count");
  for (int b : batch) {
    if (b < 0 || b >= fs[0]) throw ShapeError("bilinear_sample: batch index out of range");
  }
  const Tensor<T>& fv = g.value(feat);
  const Tensor<T>& pv = g.value(points);
  Tensor<T> out({np, c});
  auto plane = [=](const T* base, int b, int ch) {
    return base + (static_cast<std::size_t>(b) * c + ch) * h * w;
  };
  for (int i = 0; i < np; ++i) {
    const A x = pv[2 * i], y = pv[2 * i + 1];
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    for (int ch = 0; ch < c; ++ch) {
      const T* f = plane(fv.data(), batch[i], ch);
      A acc = 0.0;
      for (int p = y0; p <= y0 + 1; ++p) {
        if (p < 0 || p >= h) continue;
        for (int q = x0; q <= x0 + 1; ++q) {
          if (q < 0 || q >= w) continue;
          acc += f[p * w + q] * tri(x - q) * tri(y - p);
        }
      }
      out[static_cast<std::size_t>(i) * c + ch] = static_cast<T>(acc);
    }
  }
  return g.record(std::move(out), {feat, points}, [=](Graph<T>& gg, const Tensor<T>& go) {
    const Tensor<T>& fv = gg.value(feat);
    const Tensor<T>& pv = gg.value(points);
    const bool need_f = gg.requires_grad(feat);
    const bool need_p = gg.requires_grad(points);
    for (int i = 0; i < np; ++i) {
      const A x = pv[2 * i], y = pv[2 * i + 1];
      const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
      A dx = 0.0, dy = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const A gout = go[static_cast<std::size_t>(i) * c + ch];
        const T* f = plane(fv.data(), batch[i], ch);
        for (int p = y0; p <= y0 + 1; ++p) {
          if (p < 0 || p >= h) continue;
          for (int q = x0; q <= x0 + 1; ++q) {
            if (q < 0 || q >= w) continue;
            const A wx = tri(x - q), wy = tri(y - p);
            if (need_f) {
              T* gf = gg.grad_buffer(feat).data() + (static_cast<std::size_t>(batch[i]) * c + ch) * h * w;
              gf[p * w + q] += static_cast<T>(gout * wx * wy);
            }
            // d tri(x - q)/dx on the open interval between lattice points.
            const A sx = (x - q) >= 0 ? A{-1} : A{1};
            const A sy = (y - p) >= 0 ? A{-1} : A{1};
            dx += gout * f[p * w + q] * sx * wy;
            dy += gout * f[p * w + q] * wx * sy;
          }
        }
      }
      if (need_p) {
        Tensor<T>& gp = gg.grad_buffer(points);
        gp[2 * i] += static_cast<T>(dx);
        gp[2 * i + 1] += static_cast<T>(dy);
      }
    }
  });
}

template <typename T>
Var prroi_pool(Graph<T>& g, Var feat, Var boxes, const std::vector<RoiRef>& rois, int bins_h,
               int bins_w) {
  using A = Accum<T>;
  const Shape fs = g.shape(feat);
  const Shape bs = g.shape(boxes);
  if (fs.size() != 4) throw ShapeError("prroi_pool: expected 4-d map, got " + shape_str(fs));
  if (bs.size() != 2 || bs[1] != 4) throw ShapeError("prroi_pool: expected boxes [K,4], got " + shape_str(bs));
  if (bins_h < 1 || bins_w < 1) throw ShapeError("prroi_pool: bins must be >= 1");
  const int nb = fs[0], c = fs[1], h = fs[2], w = fs[3];
  const Tensor<T>& bv = g.value(boxes);
  for (const RoiRef& r : rois) {
    if (r.batch < 0 || r.batch >= nb || r.box < 0 || r.box >= bs[0]) {
      throw ShapeError("prroi_pool: roi reference out of range");
    }
    const T bw = bv[4 * r.box + 2], bh = bv[4 * r.box + 3];
    if (!(bw > T{0} && bh > T{0}) || !std::isfinite(static_cast<A>(bv[4 * r.box])) ||
        !std::isfinite(static_cast<A>(bv[4 * r.box + 1]))) {
      throw std::invalid_argument("prroi_pool: invalid box at row " + std::to_string(r.box));
    }
  }
  const int nr = static_cast<int>(rois.size());
  const Tensor<T>& fv = g.value(feat);
  Tensor<T> out({nr, c, bins_h, bins_w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  AxisWeights<A> ax, ay;
  for (int r = 0; r < nr; ++r) {
    const int k = rois[r].box;
    const A x = bv[4 * k], y = bv[4 * k + 1], bw = bv[4 * k + 2], bh = bv[4 * k + 3];
    const A dx = bw / bins_w, dy = bh / bins_h, area = dx * dy;
    for (int i = 0; i < bins_h; ++i) {
      axis_weights(y + i * dy, y + (i + 1) * dy, h, ay);
      for (int j = 0; j < bins_w; ++j) {
        axis_weights(x + j * dx, x + (j + 1) * dx, w, ax);
        for (int ch = 0; ch < c; ++ch) {
          const T* f = fv.data() + (static_cast<std::size_t>(rois[r].batch) * c + ch) * hw;
          A acc = 0.0;
          for (int p = ay.range.lo; p <= ay.range.hi; ++p) {
            const T* row = f + static_cast<std::size_t>(p) * w;
            A s = 0.0;
            for (int q = ax.range.lo; q <= ax.range.hi; ++q) s += row[q] * ax.w[q - ax.range.lo];
            acc += s * ay.w[p - ay.range.lo];
          }
          out[((static_cast<std::size_t>(r) * c + ch) * bins_h + i) * bins_w + j] = static_cast<T>(acc / area);
        }
      }
    }
  }

  return g.record(std::move(out), {feat, boxes}, [=](Graph<T>& gg, const Tensor<T>& go) {
    const Tensor<T>& fv = gg.value(feat);
    const Tensor<T>& bv = gg.value(boxes);
    const bool need_f = gg.requires_grad(feat);
    const bool need_b = gg.requires_grad(boxes);
    T* gf = need_f ? gg.grad_buffer(feat).data() : nullptr;
    T* gb = need_b ? gg.grad_buffer(boxes).data() : nullptr;
    AxisWeights<A> ax, ay;
    std::vector<A> row_w, row_lo, row_hi;
    for (int r = 0; r < nr; ++r) {
      const int k = rois[r].box;
      const A x = bv[4 * k], y = bv[4 * k + 1], bw = bv[4 * k + 2], bh = bv[4 * k + 3];
      const A dx = bw / bins_w, dy = bh / bins_h, area = dx * dy;
      A g_x = 0.0, g_y = 0.0, g_w = 0.0, g_h = 0.0;
      for (int i = 0; i < bins_h; ++i) {
        axis_weights(y + i * dy, y + (i + 1) * dy, h, ay);
        for (int j = 0; j < bins_w; ++j) {
          axis_weights(x + j * dx, x + (j + 1) * dx, w, ax);
          A d_x1 = 0.0, d_x2 = 0.0, d_y1 = 0.0, d_y2 = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const A gout = go[((static_cast<std::size_t>(r) * c + ch) * bins_h + i) * bins_w + j];
            if (gout == 0) continue;
            const std::size_t base = (static_cast<std::size_t>(rois[r].batch) * c + ch) * hw;
            const T* f = fv.data() + base;
            if (need_f) {
              for (int p = ay.range.lo; p <= ay.range.hi; ++p) {
                const A wy = gout * ay.w[p - ay.range.lo] / area;
                T* grow = gf + base + static_cast<std::size_t>(p) * w;
                for (int q = ax.range.lo; q <= ax.range.hi; ++q) {
                  grow[q] += static_cast<T>(wy * ax.w[q - ax.range.lo]);
                }
              }
            }
            if (!need_b) continue;
            A s = 0.0, s_x1 = 0.0, s_x2 = 0.0, s_y1 = 0.0, s_y2 = 0.0;
            for (int p = ay.range.lo; p <= ay.range.hi; ++p) {
              const T* row = f + static_cast<std::size_t>(p) * w;
              A rw = 0.0, rlo = 0.0, rhi = 0.0;
              for (int q = ax.range.lo; q <= ax.range.hi; ++q) {
                const int o = q - ax.range.lo;
                rw += row[q] * ax.w[o];
                rlo += row[q] * ax.d_lo[o];
                rhi += row[q] * ax.d_hi[o];
              }
              const int o = p - ay.range.lo;
              s += ay.w[o] * rw;
              s_x1 += ay.w[o] * rlo;
              s_x2 += ay.w[o] * rhi;
              s_y1 += ay.d_lo[o] * rw;
              s_y2 += ay.d_hi[o] * rw;
            }
            const A value = s / area;
            d_x1 += gout * (s_x1 / area + value / dx);
            d_x2 += gout * (s_x2 / area - value / dx);
            d_y1 += gout * (s_y1 / area + value / dy);
            d_y2 += gout * (s_y2 / area - value / dy);
          }
          // Bin edges: x1 = x + j*w/bins, x2 = x + (j+1)*w/bins.
          g_x += d_x1 + d_x2;
          g_w += d_x1 * j / bins_w + d_x2 * (j + 1) / bins_w;
          g_y += d_y1 + d_y2;
          g_h += d_y1 * i / bins_h + d_y2 * (i + 1) / bins_h;
        }
      }
      if (need_b) {
        gb[4 * k] += static_cast<T>(g_x);
        gb[4 * k + 1] += static_cast<T>(g_y);
        gb[4 * k + 2] += static_cast<T>(g_w);
        gb[4 * k + 3] += static_cast<T>(g_h);
      }
    }
  });
}

template Var bilinear_sample<float>(Graph<float>&, Var, Var, const std::vector<int>&);
template Var bilinear_sample<double>(Graph<double>&, Var, Var, const std::vector<int>&);
template Var prroi_pool<float>(Graph<float>&, Var, Var, const std::vector<RoiRef>&, int, int);
template Var prroi_pool<double>(Graph<double>&, Var, Var, const std::vector<RoiRef>&, int, int);
template Var bilinear_sample<long double>(Graph<long double>&, Var, Var, const std::vector<int>&);
template Var prroi_pool<long double>(Graph<long double>&, Var, Var, const std::vector<RoiRef>&, int, int);

}  // namespace comet::ad
