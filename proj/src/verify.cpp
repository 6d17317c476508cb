#include "comet/verify.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "comet/autodiff.hpp"
#include "comet/boxgeom.hpp"
#include "comet/cometnet.hpp"
#include "comet/oracles.hpp"

namespace comet::verify {

using namespace comet::ad;

namespace {

Check make(std::string name, double value, double threshold, bool pass, std::string detail = {}) {
  return {std::move(name), value, threshold, pass, std::move(detail)};
}

Tensor<double> uniform(Shape s, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

std::string worst(const FdReport& r) {
  std::ostringstream os;
  os << "checked " << r.checked << " (" << r.kinks << " kink retries), worst analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
  return os.str();
}

}  // namespace

std::vector<Check> geometry(std::uint64_t seed, int integer_pairs, int real_pairs) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pos(-50, 50), size(1, 40);
  long mismatches = 0;
  for (int k = 0; k < integer_pairs; ++k) {
    const int ax = pos(rng), ay = pos(rng), aw = size(rng), ah = size(rng);
    const int bx = pos(rng), by = pos(rng), bw = size(rng), bh = size(rng);
    const auto r = oracle::raster_iou(ax, ay, aw, ah, bx, by, bw, bh);
    const double v = iou({double(ax), double(ay), double(aw), double(ah)}, {double(bx), double(by), double(bw), double(bh)});
    if (v != static_cast<double>(r.num) / static_cast<double>(r.den)) ++mismatches;
  }
  std::uniform_real_distribution<double> rpos(-50.0, 50.0), rsize(0.01, 40.0);
  double max_diff = 0.0;
  for (int k = 0; k < real_pairs; ++k) {
    const BoxXYWH a{rpos(rng), rpos(rng), rsize(rng), rsize(rng)};
    const BoxXYWH b{rpos(rng), rpos(rng), rsize(rng), rsize(rng)};
    max_diff = std::max(max_diff, std::abs(iou(a, b) - static_cast<double>(oracle::sweep_iou(a, b))));
  }
  return {make("iou_integer_exact", double(mismatches), 0.0, mismatches == 0,
               std::to_string(integer_pairs) + " pairs vs raster count"),
          make("iou_real_max_abs_diff", max_diff, 1e-9, max_diff <= 1e-9,
               std::to_string(real_pairs) + " pairs vs coordinate sweep")};
}

std::vector<Check> proposal_contract(std::uint64_t seed, int generations) {
  Rng rng(seed);
  std::uniform_real_distribution<double> pos(0.0, 200.0), size(4.0, 120.0);
  auto run = [&](const JitterConfig& base, const std::string& tag, double max_rate) {
    JitterConfig cfg = base;
    cfg.count = 1;
    long exhausted = 0, violations = 0;
    for (int k = 0; k < generations; ++k) {
      const BoxXYWH b{pos(rng), pos(rng), size(rng), size(rng)};
      const ProposalSet ps = generate_proposals(b, cfg, rng);
      if (ps.exhausted[0]) {
        ++exhausted;
      } else if (iou(b, ps.boxes[0]) < cfg.threshold) {
        ++violations;
      }
    }
    const double rate = double(exhausted) / generations;
    return std::vector<Check>{
        make(tag + "_threshold_violations", double(violations), 0.0, violations == 0),
        make(tag + "_exhaustion_rate", rate, max_rate, rate < max_rate,
             std::to_string(exhausted) + " of " + std::to_string(generations))};
  };
  auto out = run(JitterConfig::reference(), "reference_t0.8", 0.01);
  auto test = run(JitterConfig::test(), "test_t0.1", 0.05);
  out.insert(out.end(), test.begin(), test.end());
  return out;
}

std::vector<Check> prroi_gradcheck(std::uint64_t seed, int cases) {
  Rng rng(seed);
  std::uniform_real_distribution<double> pos(-1.5, 7.0), size(0.3, 6.0);
  FdReport box_rep, feat_rep;
  for (int k = 0; k < cases; ++k) {
    Tensor<double> feat = uniform({1, 2, 8, 9}, rng, -1.0, 1.0);
    Tensor<double> box({1, 4}, std::vector<double>{pos(rng), pos(rng), size(rng), size(rng)});
    const Tensor<double> probe = uniform({1, 2, 2, 3}, rng, -1.0, 1.0);
    auto eval = [&](std::vector<Tensor<double>>* grads) {
      Graph<double> g;
      const Var f = g.leaf(feat), b = g.leaf(box);
      const Var root = sum(g, mul(g, prroi_pool(g, f, b, {{0, 0}}, 2, 3), g.constant(probe)));
      if (grads) {
        g.backward(root);
        grads->push_back(g.grad(f));
        grads->push_back(g.grad(b));
      }
      return g.value(root)[0];
    };
    std::vector<Tensor<double>> grads;
    eval(&grads);
    // Pooling is linear in the features, so a wide step carries no truncation error.
    feat_rep.merge(finite_difference_check(feat, grads[0], [&] { return eval(nullptr); }, 1e-3));
    box_rep.merge(finite_difference_check(box, grads[1], [&] { return eval(nullptr); }, 1e-6));
  }
  return {make("prroi_box_grad_rel_err", box_rep.max_rel_err, 1e-4, box_rep.max_rel_err < 1e-4, worst(box_rep)),
          make("prroi_feat_grad_rel_err", feat_rep.max_rel_err, 1e-4, feat_rep.max_rel_err < 1e-4, worst(feat_rep))};
}

std::vector<Check> network_gradcheck(std::uint64_t seed, std::size_t max_elems_per_tensor) {
  // Extended precision keeps rounding noise in the differences well below the
  // smallest gradients of the randomly initialized network.
  using L = long double;
  const NetConfig cfg = NetConfig::tiny();
  ParamStore<L> params = net::init_params<double>(cfg, seed).cast<L>();
  net::CometNet<L> model(cfg, params);
  Rng rng(seed + 1);
  const int s = cfg.input_size;
  const Tensor<L> ref_img = uniform({1, 3, s, s}, rng, 0.0, 1.0).cast<L>();
  const Tensor<L> test_img = uniform({1, 3, s, s}, rng, 0.0, 1.0).cast<L>();
  const Tensor<L> ref_boxes = net::box_tensor<L>({{14.3, 12.8, 18.5, 20.1}, {17.2, 15.6, 12.4, 14.9}});
  Tensor<L> test_boxes =
      net::box_tensor<L>({{13.1, 14.2, 20.3, 17.7}, {9.4, 11.9, 24.6, 22.2}, {18.8, 16.1, 15.2, 13.3},
                               {15.5, 10.7, 17.9, 21.4}});
  const Tensor<L> w_iou = uniform({2, 4}, rng, -1.0, 1.0).cast<L>();
  const Tensor<L> w_cle = uniform({2, 4, 2}, rng, -1.0, 1.0).cast<L>();

  auto eval = [&](bool backward) {
    Graph<L> g(false);
    const Var tb = g.leaf(test_boxes);
    const auto out = model.forward(g, g.constant(ref_img), g.constant(test_img), g.constant(ref_boxes), tb);
    const Var root = add(g, sum(g, mul(g, out.iou, g.constant(w_iou))), sum(g, mul(g, out.cle, g.constant(w_cle))));
    if (backward) {
      g.backward(root);
      return std::make_pair(g.value(root)[0], g.grad(tb));
    }
    return std::make_pair(g.value(root)[0], Tensor<L>());
  };

  params.zero_grad();
  const Tensor<L> box_grad = eval(true).second;
  std::vector<Tensor<L>> param_grads;
  for (const auto& e : params.entries()) param_grads.push_back(e.grad);

  const double eps = 1e-6;
  auto f = [&] { return eval(false).first; };
  FdReport param_rep;
  std::string worst_name;
  std::size_t idx = 0;
  for (auto& e : params.entries()) {
    const Tensor<L>& grad = param_grads[idx++];
    if (e.buffer) continue;
    const FdReport r = finite_difference_check(e.value, grad, f, eps, max_elems_per_tensor, 1e-8, 2);
    if (r.max_rel_err >= param_rep.max_rel_err) worst_name = e.name;
    param_rep.merge(r);
  }
  const FdReport box_rep = finite_difference_check(test_boxes, box_grad, f, eps, 0, 1e-8, 2);
  return {make("network_param_grad_rel_err", param_rep.max_rel_err, 1e-3, param_rep.max_rel_err < 1e-3,
               worst(param_rep) + " in " + worst_name),
          make("network_box_grad_rel_err", box_rep.max_rel_err, 1e-3, box_rep.max_rel_err < 1e-3, worst(box_rep))};
}

std::vector<Check> group_equivalence(std::uint64_t seed) {
  const NetConfig cfg = NetConfig::desk();
  ParamStore<float> params = net::init_params<float>(cfg, seed);
  net::CometNet<float> model(cfg, params);
  Rng rng(seed + 1);
  const int s = cfg.input_size, m = 8, n = 16;
  const Tensor<float> ref_img = uniform({1, 3, s, s}, rng, 0.0, 1.0).cast<float>();
  const Tensor<float> test_img = uniform({1, 3, s, s}, rng, 0.0, 1.0).cast<float>();
  std::uniform_real_distribution<double> pos(10.0, 70.0), size(16.0, 60.0);
  std::vector<BoxXYWH> refs, tests;
  for (int i = 0; i < m; ++i) refs.push_back({pos(rng), pos(rng), size(rng), size(rng)});
  for (int i = 0; i < n; ++i) tests.push_back({pos(rng), pos(rng), size(rng), size(rng)});

  Graph<float> g(false);
  const Var rf = model.features(g, g.constant(ref_img));
  const Var tf = model.features(g, g.constant(test_img));
  const Var tb = g.constant(net::box_tensor<float>(tests));
  const auto grouped = model.grouped_heads(
      g, tf, model.reference_modulation(g, rf, g.constant(net::box_tensor<float>(refs)), std::vector<int>(m, 0)), tb,
      net::GroupLayout::single_map(m, n));
  double max_diff = 0.0;
  for (int r = 0; r < m; ++r) {
    const Var mod = model.reference_modulation(g, rf, g.constant(net::box_tensor<float>({refs[r]})), {0});
    const auto single = model.grouped_heads(g, tf, mod, tb, net::GroupLayout::single_map(1, n));
    for (int i = 0; i < n; ++i) {
      max_diff = std::max(max_diff, double(std::abs(g.value(single.iou)[i] - g.value(grouped.iou)[r * n + i])));
      for (int c = 0; c < 2; ++c) {
        max_diff = std::max(max_diff, double(std::abs(g.value(single.cle)[2 * i + c] -
                                                       g.value(grouped.cle)[2 * (r * n + i) + c])));
      }
    }
  }
  return {make("grouped_vs_stacked_max_abs_diff", max_diff, 1e-6, max_diff < 1e-6,
               std::to_string(m) + " references x " + std::to_string(n) + " test boxes")};
}

}  // namespace comet::verify
