#include <Eigen/Core>
#include <cmath>

#include "comet/autodiff.hpp"

namespace comet::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& op, const std::string& msg) {
  if (!ok) throw ShapeError(op + ": " + msg);
}

template <typename T>
void require_same(const Graph<T>& g, Var a, Var b, const char* op) {
  require(g.shape(a) == g.shape(b), op,
          "shape mismatch " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
}

struct Geometry {
  int channels, height, width;
  int kh, kw;
  int out_h, out_w;
  Conv2dSpec spec;
};

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = x[c][oy*sh - ph + i*dh][ox*sw - pw + j*dw]
template <typename T>
void im2col(const T* x, const Geometry& g, T* cols) {
  const auto& s = g.spec;
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        T* row = cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * s.stride_h - s.pad_h + i * s.dil_h;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * s.stride_w - s.pad_w + j * s.dil_w;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates cols back into x.
template <typename T>
void col2im(const T* cols, const Geometry& g, T* x) {
  const auto& s = g.spec;
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const T* row = cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * s.stride_h - s.pad_h + i * s.dil_h;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + oy * g.out_w;
          T* dst = xc + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * s.stride_w - s.pad_w + j * s.dil_w;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

int conv_out(int in, int k, int stride, int pad, int dil) {
  return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

template <typename T>
Var unary(Graph<T>& g, Var x, const std::function<T(T)>& f, const std::function<T(T, T)>& df) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return g.record(std::move(out), {x}, [x, df](Graph<T>& gg, const Tensor<T>& go) {
    const Tensor<T>& xv = gg.value(x);
    Tensor<T>& gx = gg.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * df(xv[i], go[i]);
  });
}

// Splits [N,C,...] into (N, C, trailing size).
template <typename T>
std::array<int, 3> ncs(const Graph<T>& g, Var x, const char* op) {
  const Shape s = g.shape(x);
  require(s.size() >= 2, op, "expected rank >= 2, got " + shape_str(s));
  int rest = 1;
  for (std::size_t i = 2; i < s.size(); ++i) rest *= s[i];
  return {s[0], s[1], rest};
}

}  // namespace

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, const Conv2dSpec& spec) {
  const Shape xs = g.shape(x);
  const Shape ws = g.shape(w);
  require(xs.size() == 4 && ws.size() == 4, "conv2d",
          "expected 4-d input and weight, got " + shape_str(xs) + " and " + shape_str(ws));
  require(xs[1] == ws[1], "conv2d",
          "input channels " + std::to_string(xs[1]) + " != weight " + shape_str(ws));
  const int batch = xs[0], out_c = ws[0];
  Geometry geo{xs[1], xs[2], xs[3], ws[2], ws[3], 0, 0, spec};
  geo.out_h = conv_out(geo.height, geo.kh, spec.stride_h, spec.pad_h, spec.dil_h);
  geo.out_w = conv_out(geo.width, geo.kw, spec.stride_w, spec.pad_w, spec.dil_w);
  require(geo.out_h > 0 && geo.out_w > 0, "conv2d", "empty output for input " + shape_str(xs));
  if (b.valid()) {
    require(g.shape(b) == Shape{out_c}, "conv2d", "bias shape " + shape_str(g.shape(b)));
  }
  const int k = geo.channels * geo.kh * geo.kw;
  const int plane = geo.out_h * geo.out_w;
  const std::size_t in_stride = static_cast<std::size_t>(geo.channels) * geo.height * geo.width;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * plane;

  Tensor<T> out({batch, out_c, geo.out_h, geo.out_w});
  std::vector<T> cols(static_cast<std::size_t>(k) * plane);
  ConstMatMap<T> wm(g.value(w).data(), out_c, k);
  for (int n = 0; n < batch; ++n) {
    im2col(g.value(x).data() + n * in_stride, geo, cols.data());
    MatMap<T> y(out.data() + n * out_stride, out_c, plane);
    y.noalias() = wm * ConstMatMap<T>(cols.data(), k, plane);
    if (b.valid()) {
      const Tensor<T>& bv = g.value(b);
      for (int c = 0; c < out_c; ++c) y.row(c).array() += bv[c];
    }
  }
  return g.record(std::move(out), {x, w, b}, [=](Graph<T>& gg, const Tensor<T>& go) {
    const bool need_x = gg.requires_grad(x);
    const bool need_w = gg.requires_grad(w);
    const bool need_b = b.valid() && gg.requires_grad(b);
    std::vector<T> buf(static_cast<std::size_t>(k) * plane);
    ConstMatMap<T> wm(gg.value(w).data(), out_c, k);
    for (int n = 0; n < batch; ++n) {
      ConstMatMap<T> dy(go.data() + n * out_stride, out_c, plane);
      if (need_w) {
        im2col(gg.value(x).data() + n * in_stride, geo, buf.data());
        MatMap<T>(gg.grad_buffer(w).data(), out_c, k).noalias() +=
            dy * ConstMatMap<T>(buf.data(), k, plane).transpose();
      }
      if (need_b) {
        Tensor<T>& gb = gg.grad_buffer(b);
        for (int c = 0; c < out_c; ++c) gb[c] += dy.row(c).sum();
      }
      if (need_x) {
        MatMap<T>(buf.data(), k, plane).noalias() = wm.transpose() * dy;
        col2im(buf.data(), geo, gg.grad_buffer(x).data() + n * in_stride);
      }
    }
  });
}

template <typename T>
Var deconv2d(Graph<T>& g, Var x, Var w, Var b, const Deconv2dSpec& spec) {
  const Shape xs = g.shape(x);
  const Shape ws = g.shape(w);
  require(xs.size() == 4 && ws.size() == 4 && ws[2] == ws[3], "deconv2d",
          "expected 4-d input and square weight, got " + shape_str(xs) + " and " + shape_str(ws));
  require(xs[1] == ws[0], "deconv2d",
          "input channels " + std::to_string(xs[1]) + " != weight " + shape_str(ws));
  const int batch = xs[0], in_c = xs[1], in_h = xs[2], in_w = xs[3];
  const int out_c = ws[1], kk = ws[2];
  const int out_h = (in_h - 1) * spec.stride - 2 * spec.pad + spec.dilation * (kk - 1) + spec.out_pad + 1;
  const int out_w = (in_w - 1) * spec.stride - 2 * spec.pad + spec.dilation * (kk - 1) + spec.out_pad + 1;
  require(out_h > 0 && out_w > 0, "deconv2d", "empty output for input " + shape_str(xs));
  require(spec.out_pad < spec.stride || spec.out_pad < spec.dilation, "deconv2d",
          "output padding must be smaller than stride or dilation");
  if (b.valid()) require(g.shape(b) == Shape{out_c}, "deconv2d", "bias shape " + shape_str(g.shape(b)));

  // The output map plays the role of a convolution input whose im2col grid is the input map.
  Conv2dSpec cs{spec.stride, spec.stride, spec.pad, spec.pad, spec.dilation, spec.dilation};
  Geometry geo{out_c, out_h, out_w, kk, kk, in_h, in_w, cs};
  const int k = out_c * kk * kk;
  const int plane = in_h * in_w;
  const std::size_t in_stride = static_cast<std::size_t>(in_c) * plane;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * out_h * out_w;

  Tensor<T> out({batch, out_c, out_h, out_w});
  std::vector<T> cols(static_cast<std::size_t>(k) * plane);
  ConstMatMap<T> wm(g.value(w).data(), in_c, k);
  for (int n = 0; n < batch; ++n) {
    MatMap<T>(cols.data(), k, plane).noalias() =
        wm.transpose() * ConstMatMap<T>(g.value(x).data() + n * in_stride, in_c, plane);
    col2im(cols.data(), geo, out.data() + n * out_stride);
  }
  if (b.valid()) {
    const Tensor<T>& bv = g.value(b);
    const int op = out_h * out_w;
    for (int n = 0; n < batch; ++n)
      for (int c = 0; c < out_c; ++c) {
        T* p = out.data() + n * out_stride + static_cast<std::size_t>(c) * op;
        for (int i = 0; i < op; ++i) p[i] += bv[c];
      }
  }
  return g.record(std::move(out), {x, w, b}, [=](Graph<T>& gg, const Tensor<T>& go) {
    std::vector<T> dcols(static_cast<std::size_t>(k) * plane);
    ConstMatMap<T> wm(gg.value(w).data(), in_c, k);
    const bool need_x = gg.requires_grad(x);
    const bool need_w = gg.requires_grad(w);
    const bool need_b = b.valid() && gg.requires_grad(b);
    const int op = out_h * out_w;
    for (int n = 0; n < batch; ++n) {
      im2col(go.data() + n * out_stride, geo, dcols.data());
      ConstMatMap<T> dc(dcols.data(), k, plane);
      if (need_x) {
        MatMap<T>(gg.grad_buffer(x).data() + n * in_stride, in_c, plane).noalias() += wm * dc;
      }
      if (need_w) {
        MatMap<T>(gg.grad_buffer(w).data(), in_c, k).noalias() +=
            ConstMatMap<T>(gg.value(x).data() + n * in_stride, in_c, plane) * dc.transpose();
      }
      if (need_b) {
        Tensor<T>& gb = gg.grad_buffer(b);
        for (int c = 0; c < out_c; ++c) {
          const T* p = go.data() + n * out_stride + static_cast<std::size_t>(c) * op;
          T s{0};
          for (int i = 0; i < op; ++i) s += p[i];
          gb[c] += s;
        }
      }
    }
  });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const Shape xs = g.shape(x);
  const Shape ws = g.shape(w);
  require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1], "linear",
          "incompatible shapes " + shape_str(xs) + " x " + shape_str(ws));
  const int rows = xs[0], in = xs[1], outn = ws[0];
  if (b.valid()) require(g.shape(b) == Shape{outn}, "linear", "bias shape " + shape_str(g.shape(b)));
  Tensor<T> out({rows, outn});
  MatMap<T> y(out.data(), rows, outn);
  y.noalias() = ConstMatMap<T>(g.value(x).data(), rows, in) *
                ConstMatMap<T>(g.value(w).data(), outn, in).transpose();
  if (b.valid()) {
    const Tensor<T>& bv = g.value(b);
    for (int r = 0; r < rows; ++r)
      for (int o = 0; o < outn; ++o) y(r, o) += bv[o];
  }
  return g.record(std::move(out), {x, w, b}, [=](Graph<T>& gg, const Tensor<T>& go) {
    ConstMatMap<T> dy(go.data(), rows, outn);
    if (gg.requires_grad(x)) {
      MatMap<T>(gg.grad_buffer(x).data(), rows, in).noalias() +=
          dy * ConstMatMap<T>(gg.value(w).data(), outn, in);
    }
    if (gg.requires_grad(w)) {
      MatMap<T>(gg.grad_buffer(w).data(), outn, in).noalias() +=
          dy.transpose() * ConstMatMap<T>(gg.value(x).data(), rows, in);
    }
    if (b.valid() && gg.requires_grad(b)) {
      Tensor<T>& gb = gg.grad_buffer(b);
      for (int o = 0; o < outn; ++o) gb[o] += dy.col(o).sum();
    }
  });
}

template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, const BatchNormState<T>& state) {
  using A = Accum<T>;
  const auto [n, c, s] = ncs(g, x, "batch_norm");
  require(g.shape(gamma) == Shape{c} && g.shape(beta) == Shape{c}, "batch_norm",
          "affine parameters must have shape [" + std::to_string(c) + "]");
  require(state.running_mean && state.running_var, "batch_norm", "missing running statistics");
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& gv = g.value(gamma);
  const Tensor<T>& bv = g.value(beta);
  const bool training = g.training();
  const A m = static_cast<A>(n) * s;
  std::vector<A> inv_std(c);
  Tensor<T> xhat(xv.shape());
  Tensor<T> out(xv.shape());
  auto idx = [c, s](int ni, int ci, int si) {
    return (static_cast<std::size_t>(ni) * c + ci) * s + si;
  };
  for (int ci = 0; ci < c; ++ci) {
    A mu, var;
    if (training) {
      A acc = 0.0;
      for (int ni = 0; ni < n; ++ni)
        for (int si = 0; si < s; ++si) acc += xv[idx(ni, ci, si)];
      mu = acc / m;
      A sq = 0.0;
      for (int ni = 0; ni < n; ++ni)
        for (int si = 0; si < s; ++si) {
          const A d = xv[idx(ni, ci, si)] - mu;
          sq += d * d;
        }
      var = sq / m;
      T& rm = (*state.running_mean)[ci];
      T& rv = (*state.running_var)[ci];
      rm = static_cast<T>((1.0 - state.momentum) * rm + state.momentum * mu);
      const A unbiased = m > 1 ? var * m / (m - 1.0) : var;
      rv = static_cast<T>((1.0 - state.momentum) * rv + state.momentum * unbiased);
    } else {
      mu = (*state.running_mean)[ci];
      var = (*state.running_var)[ci];
    }
    inv_std[ci] = 1.0 / std::sqrt(var + state.eps);
    for (int ni = 0; ni < n; ++ni)
      for (int si = 0; si < s; ++si) {
        const std::size_t i = idx(ni, ci, si);
        xhat[i] = static_cast<T>((xv[i] - mu) * inv_std[ci]);
        out[i] = gv[ci] * xhat[i] + bv[ci];
      }
  }
  return g.record(std::move(out), {x, gamma, beta},
                  [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gg,
                                                                            const Tensor<T>& go) {
                    const Tensor<T>& gv = gg.value(gamma);
                    const bool need_x = gg.requires_grad(x);
                    for (int ci = 0; ci < c; ++ci) {
                      A sum_dy = 0.0, sum_dy_xhat = 0.0;
                      for (int ni = 0; ni < n; ++ni)
                        for (int si = 0; si < s; ++si) {
                          const std::size_t i = idx(ni, ci, si);
                          sum_dy += go[i];
                          sum_dy_xhat += static_cast<A>(go[i]) * xhat[i];
                        }
                      if (gg.requires_grad(gamma)) gg.grad_buffer(gamma)[ci] += static_cast<T>(sum_dy_xhat);
                      if (gg.requires_grad(beta)) gg.grad_buffer(beta)[ci] += static_cast<T>(sum_dy);
                      if (!need_x) continue;
                      Tensor<T>& gx = gg.grad_buffer(x);
                      const A scale = gv[ci] * inv_std[ci];
                      for (int ni = 0; ni < n; ++ni)
                        for (int si = 0; si < s; ++si) {
                          const std::size_t i = idx(ni, ci, si);
                          if (training) {
                            gx[i] += static_cast<T>(scale / m *
                                                    (m * go[i] - sum_dy - xhat[i] * sum_dy_xhat));
                          } else {
                            gx[i] += static_cast<T>(scale * go[i]);
                          }
                        }
                    }
                  });
}

template <typename T>
Var leaky_relu(Graph<T>& g, Var x, double slope) {
  const T a = static_cast<T>(slope);
  return unary<T>(
      g, x, [a](T v) { return v > T{0} ? v : a * v; },
      [a](T v, T) { return v > T{0} ? T{1} : a; });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-xv[i]));
  Tensor<T> saved = out;
  return g.record(std::move(out), {x}, [x, saved = std::move(saved)](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    for (std::size_t i = 0; i < saved.size(); ++i) gx[i] += go[i] * saved[i] * (T{1} - saved[i]);
  });
}

template <typename T>
Var global_avg_pool(Graph<T>& g, Var x) {
  using A = Accum<T>;
  const auto [n, c, s] = ncs(g, x, "global_avg_pool");
  require(g.shape(x).size() == 4, "global_avg_pool", "expected 4-d input");
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out({n, c});
  for (int i = 0; i < n * c; ++i) {
    A acc = 0.0;
    for (int k = 0; k < s; ++k) acc += xv[static_cast<std::size_t>(i) * s + k];
    out[i] = static_cast<T>(acc / s);
  }
  return g.record(std::move(out), {x}, [x, n = n, c = c, s = s](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    for (int i = 0; i < n * c; ++i) {
      const T d = go[i] / static_cast<T>(s);
      for (int k = 0; k < s; ++k) gx[static_cast<std::size_t>(i) * s + k] += d;
    }
  });
}

template <typename T>
Var avg_pool2d(Graph<T>& g, Var x, int kernel, int stride, int pad) {
  const Shape xs = g.shape(x);
  require(xs.size() == 4, "avg_pool2d", "expected 4-d input, got " + shape_str(xs));
  const int nc = xs[0] * xs[1], h = xs[2], w = xs[3];
  const int oh = conv_out(h, kernel, stride, pad, 1), ow = conv_out(w, kernel, stride, pad, 1);
  require(oh > 0 && ow > 0, "avg_pool2d", "empty output");
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out({xs[0], xs[1], oh, ow});
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  auto visit = [=](int p, int oy, int ox, auto&& fn) {
    for (int i = 0; i < kernel; ++i) {
      const int iy = oy * stride - pad + i;
      if (iy < 0 || iy >= h) continue;
      for (int j = 0; j < kernel; ++j) {
        const int ix = ox * stride - pad + j;
        if (ix < 0 || ix >= w) continue;
        fn((static_cast<std::size_t>(p) * h + iy) * w + ix);
      }
    }
  };
  for (int p = 0; p < nc; ++p)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T acc{0};
        visit(p, oy, ox, [&](std::size_t i) { acc += xv[i]; });
        out[(static_cast<std::size_t>(p) * oh + oy) * ow + ox] = acc * inv;
      }
  return g.record(std::move(out), {x}, [=](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    for (int p = 0; p < nc; ++p)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T d = go[(static_cast<std::size_t>(p) * oh + oy) * ow + ox] * inv;
          visit(p, oy, ox, [&](std::size_t i) { gx[i] += d; });
        }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  require_same(g, a, b, "add");
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gg, const Tensor<T>& go) {
    for (Var v : {a, b}) {
      if (!gg.requires_grad(v)) continue;
      Tensor<T>& gv = gg.grad_buffer(v);
      for (std::size_t i = 0; i < go.size(); ++i) gv[i] += go[i];
    }
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  require_same(g, a, b, "sub");
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gg, const Tensor<T>& go) {
    if (gg.requires_grad(a)) {
      Tensor<T>& ga = gg.grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (gg.requires_grad(b)) {
      Tensor<T>& gb = gg.grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  require_same(g, a, b, "mul");
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gg, const Tensor<T>& go) {
    const Tensor<T>& av = gg.value(a);
    const Tensor<T>& bv = gg.value(b);
    if (gg.requires_grad(a)) {
      Tensor<T>& ga = gg.grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (gg.requires_grad(b)) {
      Tensor<T>& gb = gg.grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

template <typename T>
Var affine(Graph<T>& g, Var x, double a, double b) {
  const T ta = static_cast<T>(a), tb = static_cast<T>(b);
  return unary<T>(
      g, x, [ta, tb](T v) { return ta * v + tb; }, [ta](T, T) { return ta; });
}

template <typename T>
Var square(Graph<T>& g, Var x) {
  return unary<T>(
      g, x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var smooth_l1(Graph<T>& g, Var x) {
  return unary<T>(
      g, x,
      [](T v) {
        const T a = std::abs(v);
        return a < T{1} ? T{0.5} * v * v : a - T{0.5};
      },
      [](T v, T) {
        if (std::abs(v) < T{1}) return v;
        return v > T{0} ? T{1} : T{-1};
      });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  using A = Accum<T>;
  const Tensor<T>& xv = g.value(x);
  A acc = 0.0;
  for (T v : xv.values()) acc += v;
  return g.record(Tensor<T>::scalar(static_cast<T>(acc)), {x}, [x](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[0];
  });
}

template <typename T>
Var mean(Graph<T>& g, Var x) {
  using A = Accum<T>;
  const Tensor<T>& xv = g.value(x);
  require(xv.size() > 0, "mean", "empty input");
  A acc = 0.0;
  for (T v : xv.values()) acc += v;
  const A n = static_cast<A>(xv.size());
  return g.record(Tensor<T>::scalar(static_cast<T>(acc / n)), {x}, [x, n](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    const T d = static_cast<T>(go[0] / n);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d;
  });
}

template <typename T>
Var expand_channels(Graph<T>& g, Var v, int height, int width) {
  const Shape vs = g.shape(v);
  require(vs.size() == 2, "expand_channels", "expected [R,C], got " + shape_str(vs));
  const int rc = vs[0] * vs[1], s = height * width;
  const Tensor<T>& vv = g.value(v);
  Tensor<T> out({vs[0], vs[1], height, width});
  for (int i = 0; i < rc; ++i) std::fill_n(out.data() + static_cast<std::size_t>(i) * s, s, vv[i]);
  return g.record(std::move(out), {v}, [v, rc, s](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gv = gg.grad_buffer(v);
    for (int i = 0; i < rc; ++i) {
      T acc{0};
      for (int k = 0; k < s; ++k) acc += go[static_cast<std::size_t>(i) * s + k];
      gv[i] += acc;
    }
  });
}

template <typename T>
Var expand_spatial(Graph<T>& g, Var m, int channels) {
  const Shape ms = g.shape(m);
  require(ms.size() == 4 && ms[1] == 1, "expand_spatial", "expected [R,1,H,W], got " + shape_str(ms));
  const int r = ms[0], s = ms[2] * ms[3];
  const Tensor<T>& mv = g.value(m);
  Tensor<T> out({r, channels, ms[2], ms[3]});
  for (int i = 0; i < r; ++i)
    for (int c = 0; c < channels; ++c)
      std::copy_n(mv.data() + static_cast<std::size_t>(i) * s, s,
                  out.data() + (static_cast<std::size_t>(i) * channels + c) * s);
  return g.record(std::move(out), {m}, [m, r, s, channels](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gm = gg.grad_buffer(m);
    for (int i = 0; i < r; ++i)
      for (int c = 0; c < channels; ++c) {
        const T* src = go.data() + (static_cast<std::size_t>(i) * channels + c) * s;
        T* dst = gm.data() + static_cast<std::size_t>(i) * s;
        for (int k = 0; k < s; ++k) dst[k] += src[k];
      }
  });
}

template <typename T>
Var concat_channels(Graph<T>& g, const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_channels", "no inputs");
  const Shape first = g.shape(xs[0]);
  require(first.size() >= 2, "concat_channels", "expected rank >= 2");
  int total_c = 0;
  for (Var v : xs) {
    Shape s = g.shape(v);
    require(s.size() == first.size() && s[0] == first[0], "concat_channels",
            "incompatible " + shape_str(s) + " vs " + shape_str(first));
    for (std::size_t i = 2; i < s.size(); ++i) {
      require(s[i] == first[i], "concat_channels", "incompatible " + shape_str(s) + " vs " + shape_str(first));
    }
    total_c += s[1];
  }
  const int n = first[0];
  const std::size_t rest = numel(first) / (static_cast<std::size_t>(first[0]) * first[1]);
  Shape os = first;
  os[1] = total_c;
  Tensor<T> out(os);
  std::vector<int> channels;
  int c0 = 0;
  for (Var v : xs) {
    const int c = g.shape(v)[1];
    channels.push_back(c);
    const Tensor<T>& vv = g.value(v);
    for (int ni = 0; ni < n; ++ni) {
      std::copy_n(vv.data() + static_cast<std::size_t>(ni) * c * rest, c * rest,
                  out.data() + (static_cast<std::size_t>(ni) * total_c + c0) * rest);
    }
    c0 += c;
  }
  return g.record(std::move(out), xs, [=](Graph<T>& gg, const Tensor<T>& go) {
    int c0 = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const int c = channels[k];
      if (gg.requires_grad(xs[k])) {
        Tensor<T>& gv = gg.grad_buffer(xs[k]);
        for (int ni = 0; ni < n; ++ni) {
          const T* src = go.data() + (static_cast<std::size_t>(ni) * total_c + c0) * rest;
          T* dst = gv.data() + static_cast<std::size_t>(ni) * c * rest;
          for (std::size_t i = 0; i < c * rest; ++i) dst[i] += src[i];
        }
      }
      c0 += c;
    }
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  Tensor<T> out = g.value(x).reshaped(std::move(shape));
  return g.record(std::move(out), {x}, [x](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

template <typename T>
Var gather_rows(Graph<T>& g, Var x, const std::vector<int>& rows) {
  const Shape xs = g.shape(x);
  require(!xs.empty(), "gather_rows", "scalar input");
  const std::size_t row = numel(xs) / static_cast<std::size_t>(xs[0]);
  for (int r : rows) require(r >= 0 && r < xs[0], "gather_rows", "row index out of range");
  Shape os = xs;
  os[0] = static_cast<int>(rows.size());
  Tensor<T> out(os);
  const Tensor<T>& xv = g.value(x);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xv.data() + rows[i] * row, row, out.data() + i * row);
  }
  return g.record(std::move(out), {x}, [x, rows, row](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const T* src = go.data() + i * row;
      T* dst = gx.data() + rows[i] * row;
      for (std::size_t k = 0; k < row; ++k) dst[k] += src[k];
    }
  });
}

template <typename T>
Var pick(Graph<T>& g, Var x, const std::vector<std::size_t>& flat_index) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out({static_cast<int>(flat_index.size())});
  for (std::size_t i = 0; i < flat_index.size(); ++i) {
    require(flat_index[i] < xv.size(), "pick", "index out of range");
    out[i] = xv[flat_index[i]];
  }
  return g.record(std::move(out), {x}, [x, flat_index](Graph<T>& gg, const Tensor<T>& go) {
    Tensor<T>& gx = gg.grad_buffer(x);
    for (std::size_t i = 0; i < flat_index.size(); ++i) gx[flat_index[i]] += go[i];
  });
}

#define COMET_INSTANTIATE_OPS(T)                                                            \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var, const Conv2dSpec&);                      \
  template Var deconv2d<T>(Graph<T>&, Var, Var, Var, const Deconv2dSpec&);                  \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                         \
  template Var batch_norm<T>(Graph<T>&, Var, Var, Var, const BatchNormState<T>&);           \
  template Var leaky_relu<T>(Graph<T>&, Var, double);                                       \
  template Var sigmoid<T>(Graph<T>&, Var);                                                  \
  template Var global_avg_pool<T>(Graph<T>&, Var);                                          \
  template Var avg_pool2d<T>(Graph<T>&, Var, int, int, int);                                \
  template Var add<T>(Graph<T>&, Var, Var);                                                 \
  template Var sub<T>(Graph<T>&, Var, Var);                                                 \
  template Var mul<T>(Graph<T>&, Var, Var);                                                 \
  template Var affine<T>(Graph<T>&, Var, double, double);                                   \
  template Var square<T>(Graph<T>&, Var);                                                   \
  template Var smooth_l1<T>(Graph<T>&, Var);                                                \
  template Var sum<T>(Graph<T>&, Var);                                                      \
  template Var mean<T>(Graph<T>&, Var);                                                     \
  template Var expand_channels<T>(Graph<T>&, Var, int, int);                                \
  template Var expand_spatial<T>(Graph<T>&, Var, int);                                      \
  template Var concat_channels<T>(Graph<T>&, const std::vector<Var>&);                      \
  template Var reshape<T>(Graph<T>&, Var, Shape);                                           \
  template Var gather_rows<T>(Graph<T>&, Var, const std::vector<int>&);                     \
  template Var pick<T>(Graph<T>&, Var, const std::vector<std::size_t>&);

COMET_INSTANTIATE_OPS(float)
COMET_INSTANTIATE_OPS(double)
COMET_INSTANTIATE_OPS(long double)

}  // namespace comet::ad
