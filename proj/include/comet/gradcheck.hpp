#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "comet/tensor.hpp"

namespace comet {

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  void merge(const FdReport& o) {
    if (o.max_rel_err > max_rel_err) {
      max_rel_err = o.max_rel_err;
      worst_index = o.worst_index;
      worst_analytic = o.worst_analytic;
      worst_numeric = o.worst_numeric;
    }
    checked += o.checked;
    kinks += o.kinks;
  }
};

/// Compares `analytic` against central differences of `eval` obtained by
/// perturbing `x` in place. At most `max_elems` evenly strided elements are
/// checked. `x` is restored afterwards.
///
/// With kink_retries > 0, an element whose left and right one-sided slopes
/// disagree by more than kink_tol (relative) has a non-differentiable point
/// inside the stencil; eps is divided by 10 and the element re-measured, up to
/// kink_retries times. Such elements are counted in `kinks`.
template <typename T, typename Eval>
FdReport finite_difference_check(Tensor<T>& x, const Tensor<T>& analytic, Eval&& eval, double eps = 1e-6,
                                 std::size_t max_elems = 0, double floor = 1e-8, int kink_retries = 0,
                                 double kink_tol = 1e-3) {
  FdReport rep;
  const std::size_t n = x.size();
  const std::size_t stride = (max_elems == 0 || n <= max_elems) ? 1 : (n + max_elems - 1) / max_elems;
  const T f0 = kink_retries > 0 ? eval() : T(0);
  for (std::size_t i = 0; i < n; i += stride) {
    const T orig = x[i];
    double h = eps, numeric = 0.0;
    for (int attempt = 0;; ++attempt) {
      x[i] = orig + static_cast<T>(h);
      const T fp = eval();
      x[i] = orig - static_cast<T>(h);
      const T fm = eval();
      x[i] = orig;
      numeric = static_cast<double>((fp - fm) / (2 * static_cast<T>(h)));
      if (attempt >= kink_retries) break;
      const double right = static_cast<double>((fp - f0) / static_cast<T>(h));
      const double left = static_cast<double>((f0 - fm) / static_cast<T>(h));
      if (relative_error(right, left, floor) <= kink_tol) break;
      if (attempt == 0) ++rep.kinks;
      h /= 10;
    }
    const double a = analytic.empty() ? 0.0 : static_cast<double>(analytic[i]);
    const double e = relative_error(a, numeric, floor);
    if (e > rep.max_rel_err || rep.checked == 0) {
      rep.max_rel_err = std::max(rep.max_rel_err, e);
      rep.worst_index = i;
      rep.worst_analytic = a;
      rep.worst_numeric = numeric;
    }
    ++rep.checked;
  }
  return rep;
}

}  // namespace comet
