#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "comet/autodiff.hpp"
#include "comet/gradcheck.hpp"
#include "comet/params.hpp"

using namespace comet;
using namespace comet::ad;

namespace {

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Builds a scalar from leaves; the scalar is a random linear functional of
// the op output so every output element is exercised.
using Build = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

double max_leaf_error(std::vector<Tensor<double>> inputs, const Build& build, std::uint64_t seed,
                      bool training = false, double eps = 1e-6) {
  std::mt19937_64 rng(seed);
  Tensor<double> probe;
  auto eval = [&](bool keep, std::vector<Tensor<double>>* grads) {
    Graph<double> g(training);
    std::vector<Var> leaves;
    for (auto& t : inputs) leaves.push_back(g.leaf(t));
    Var out = build(g, leaves);
    if (probe.empty()) probe = random_tensor(g.shape(out), rng);
    Var w = g.constant(probe);
    Var root = sum(g, mul(g, out, w));
    if (keep) {
      g.backward(root);
      for (Var l : leaves) grads->push_back(g.grad(l));
    }
    return g.value(root)[0];
  };
  std::vector<Tensor<double>> grads;
  eval(true, &grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto rep = finite_difference_check(inputs[k], grads[k], [&] { return eval(false, nullptr); }, eps);
    worst = std::max(worst, rep.max_rel_err);
  }
  return worst;
}

}  // namespace

TEST(Conv2d, IdentityKernelReproducesInput) {
  std::mt19937_64 rng(1);
  Graph<double> g;
  Tensor<double> x = random_tensor({1, 1, 5, 6}, rng);
  Var out = conv2d(g, g.constant(x), g.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                   g.constant(Tensor<double>({1}, 0.0)), Conv2dSpec{});
  EXPECT_EQ(g.value(out), x);
}

TEST(Conv2d, RejectsChannelMismatch) {
  Graph<double> g;
  EXPECT_THROW(conv2d(g, g.constant(Tensor<double>({1, 2, 4, 4})), g.constant(Tensor<double>({3, 1, 3, 3})), Var{},
                      Conv2dSpec{}),
               ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  struct Case {
    int kh, kw;
    Conv2dSpec spec;
  };
  for (const Case& c : {Case{3, 3, Conv2dSpec::same(3, 3)}, Case{3, 3, Conv2dSpec::strided(3, 2)},
                        Case{1, 3, Conv2dSpec::same(1, 3)}, Case{5, 1, Conv2dSpec::same(5, 1)},
                        Case{3, 3, Conv2dSpec::same(3, 3, 2)}, Case{3, 3, Conv2dSpec{}}}) {
    const double err = max_leaf_error(
        {random_tensor({2, 3, 7, 6}, rng), random_tensor({4, 3, c.kh, c.kw}, rng), random_tensor({4}, rng)},
        [&](Graph<double>& g, const std::vector<Var>& v) { return conv2d(g, v[0], v[1], v[2], c.spec); }, 3);
    EXPECT_LT(err, 1e-5) << c.kh << "x" << c.kw;
  }
}

TEST(Deconv2d, OutputSizeAndGradient) {
  std::mt19937_64 rng(3);
  Graph<double> g;
  Var y = deconv2d(g, g.constant(random_tensor({1, 2, 9, 9}, rng)), g.constant(random_tensor({2, 3, 3, 3}, rng)),
                   Var{}, Deconv2dSpec{});
  EXPECT_EQ(g.shape(y), (Shape{1, 3, 18, 18}));
  const double err = max_leaf_error(
      {random_tensor({2, 2, 3, 4}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({3}, rng)},
      [](Graph<double>& g, const std::vector<Var>& v) { return deconv2d(g, v[0], v[1], v[2], Deconv2dSpec{}); }, 4);
  EXPECT_LT(err, 1e-6);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const double err = max_leaf_error(
      {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)},
      [](Graph<double>& g, const std::vector<Var>& v) { return linear(g, v[0], v[1], v[2]); }, 5);
  EXPECT_LT(err, 1e-6);
}

TEST(BatchNorm, TrainingAndInferenceGradients) {
  std::mt19937_64 rng(5);
  for (bool training : {true, false}) {
    Tensor<double> rm({3}, 0.2), rv({3}, 1.5);
    const double err = max_leaf_error(
        {random_tensor({4, 3, 2, 2}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)},
        [&](Graph<double>& g, const std::vector<Var>& v) {
          return batch_norm(g, v[0], v[1], v[2], BatchNormState<double>{&rm, &rv});
        },
        6, training);
    EXPECT_LT(err, 1e-5) << "training=" << training;
  }
}

TEST(BatchNorm, TrainingNormalizesAndUpdatesRunningStats) {
  Tensor<double> rm({1}, 0.0), rv({1}, 1.0);
  Graph<double> g(true);
  Var y = batch_norm(g, g.constant(Tensor<double>({4, 1}, std::vector<double>{1, 2, 3, 4})),
                     g.constant(Tensor<double>({1}, 1.0)), g.constant(Tensor<double>({1}, 0.0)),
                     BatchNormState<double>{&rm, &rv, 0.1, 0.0});
  EXPECT_NEAR(g.value(y)[0], -1.5 / std::sqrt(1.25), 1e-12);
  EXPECT_NEAR(rm[0], 0.25, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(Activations, LeakyReluHandValues) {
  Graph<double> g;
  Var y = leaky_relu(g, g.constant(Tensor<double>({2}, std::vector<double>{-2.0, 3.0})), 0.01);
  EXPECT_DOUBLE_EQ(g.value(y)[0], -0.02);
  EXPECT_DOUBLE_EQ(g.value(y)[1], 3.0);
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  EXPECT_LT(max_leaf_error({random_tensor({10}, rng)},
                           [](Graph<double>& g, const std::vector<Var>& v) { return sigmoid(g, v[0]); }, 7),
            1e-7);
  EXPECT_LT(max_leaf_error({random_tensor({10}, rng, 0.1, 2.0)},
                           [](Graph<double>& g, const std::vector<Var>& v) {
                             return leaky_relu(g, affine(g, v[0], -1.0, 0.0), 0.01);
                           },
                           8),
            1e-7);
  EXPECT_LT(max_leaf_error({random_tensor({12}, rng, -3.0, 3.0)},
                           [](Graph<double>& g, const std::vector<Var>& v) { return smooth_l1(g, v[0]); }, 9),
            1e-6);
}

TEST(FiniteDifference, KinkInsideStencilIsRemeasured) {
  // Leaky ReLU with its kink 3e-7 to the right of x = 0.
  Tensor<double> x({1});
  x[0] = 0.0;
  auto f = [&] {
    const double z = x[0] - 3e-7;
    return z > 0 ? 2.0 * z : 0.01 * z;
  };
  Tensor<double> analytic({1});
  analytic[0] = 0.01;
  const FdReport plain = finite_difference_check(x, analytic, f, 1e-6);
  EXPECT_GT(plain.max_rel_err, 0.5);
  const FdReport aware = finite_difference_check(x, analytic, f, 1e-6, 0, 1e-8, 2);
  EXPECT_EQ(aware.kinks, 1u);
  EXPECT_LT(aware.max_rel_err, 1e-6);
  EXPECT_EQ(x[0], 0.0);

  // Retries never rescue a wrong gradient.
  analytic[0] = 0.02;
  EXPECT_GT(finite_difference_check(x, analytic, f, 1e-6, 0, 1e-8, 2).max_rel_err, 0.4);
}

TEST(FiniteDifference, SmoothFunctionsNeedNoRetry) {
  Tensor<double> x({3});
  x[0] = 0.3;
  x[1] = -1.2;
  x[2] = 2.0;
  auto f = [&] { return std::sin(x[0]) * x[1] + x[2] * x[2]; };
  Tensor<double> analytic({3});
  analytic[0] = std::cos(0.3) * -1.2;
  analytic[1] = std::sin(0.3);
  analytic[2] = 4.0;
  const FdReport r = finite_difference_check(x, analytic, f, 1e-6, 0, 1e-8, 2);
  EXPECT_EQ(r.kinks, 0u);
  EXPECT_LT(r.max_rel_err, 1e-8);
}

TEST(Pooling, GlobalAverageOfConstantMap) {
  for (int side : {1, 3, 8}) {
    Graph<double> g;
    Var y = global_avg_pool(g, g.constant(Tensor<double>({2, 3, side, side}, 1.75)));
    for (double v : g.value(y).values()) EXPECT_DOUBLE_EQ(v, 1.75);
  }
}

TEST(Pooling, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  EXPECT_LT(max_leaf_error({random_tensor({2, 3, 4, 5}, rng)},
                           [](Graph<double>& g, const std::vector<Var>& v) { return global_avg_pool(g, v[0]); }, 11),
            1e-7);
  EXPECT_LT(max_leaf_error({random_tensor({1, 2, 5, 5}, rng)},
                           [](Graph<double>& g, const std::vector<Var>& v) { return avg_pool2d(g, v[0], 3, 1, 1); },
                           12),
            1e-7);
}

TEST(Structural, BroadcastConcatGatherGradients) {
  std::mt19937_64 rng(13);
  EXPECT_LT(max_leaf_error({random_tensor({2, 3}, rng), random_tensor({2, 1, 4, 4}, rng)},
                           [](Graph<double>& g, const std::vector<Var>& v) {
                             return mul(g, expand_channels(g, v[0], 4, 4), expand_spatial(g, v[1], 3));
                           },
                           14),
            1e-7);
  EXPECT_LT(max_leaf_error({random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 1, 3, 3}, rng)},
                           [](Graph<double>& g, const std::vector<Var>& v) {
                             return gather_rows(g, concat_channels(g, {v[0], v[1]}), {1, 0, 1});
                           },
                           15),
            1e-7);
}

TEST(BilinearSample, LatticePointAndMidpoint) {
  Graph<double> g;
  // Column-split 2x2 map: left column 0, right column 1.
  Var f = g.constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{0, 1, 0, 1}));
  Var pts = g.constant(Tensor<double>({2, 2}, std::vector<double>{1.0, 0.0, 0.5, 0.5}));
  Var y = bilinear_sample(g, f, pts, {0, 0});
  EXPECT_DOUBLE_EQ(g.value(y)[0], 1.0);
  EXPECT_DOUBLE_EQ(g.value(y)[1], 0.5);
}

TEST(BilinearSample, GradientMatchesFiniteDifferencesOffLattice) {
  std::mt19937_64 rng(16);
  Tensor<double> pts({6, 2});
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::uniform_int_distribution<int> cell(-1, 5);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = cell(rng) + u(rng);
  const double err = max_leaf_error(
      {random_tensor({1, 2, 5, 5}, rng), pts},
      [](Graph<double>& g, const std::vector<Var>& v) { return bilinear_sample(g, v[0], v[1], {0, 0, 0, 0, 0, 0}); },
      17);
  EXPECT_LT(err, 1e-6);
}

TEST(PrRoiPool, ConstantFieldHasZeroBoxGradient) {
  Graph<double> g;
  Var f = g.constant(Tensor<double>({1, 2, 8, 8}, 3.0));
  Var boxes = g.leaf(Tensor<double>({1, 4}, std::vector<double>{1.3, 2.1, 3.7, 2.9}));
  Var y = prroi_pool(g, f, boxes, {{0, 0}}, 3, 3);
  for (double v : g.value(y).values()) EXPECT_NEAR(v, 3.0, 1e-12);
  g.backward(sum(g, y));
  for (double v : g.grad(boxes).values()) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(PrRoiPool, LinearRampGivesBinCenterAbscissa) {
  const int w = 12;
  Tensor<double> ramp({1, 1, 10, w});
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < w; ++x) ramp.at(0, 0, y, x) = x;
  Graph<double> g;
  const double bx = 2.3, bw = 6.5;
  Var y = prroi_pool(g, g.constant(ramp), g.constant(Tensor<double>({1, 4}, std::vector<double>{bx, 1.2, bw, 5.0})),
                     {{0, 0}}, 2, 5);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 5; ++j) {
      EXPECT_NEAR(g.value(y)[i * 5 + j], bx + (j + 0.5) * bw / 5, 1e-12);
    }
}

TEST(PrRoiPool, SingleCellBoxEqualsCellValueOnPlateau) {
  // Bilinear surface is flat around an interior cell whose neighbors share its value.
  Tensor<double> f({1, 1, 5, 5}, 0.0);
  for (int y = 1; y <= 3; ++y)
    for (int x = 1; x <= 3; ++x) f.at(0, 0, y, x) = 4.5;
  Graph<double> g;
  Var y = prroi_pool(g, g.constant(f), g.constant(Tensor<double>({1, 4}, std::vector<double>{1.5, 1.5, 1.0, 1.0})),
                     {{0, 0}}, 1, 1);
  EXPECT_NEAR(g.value(y)[0], 4.5, 1e-12);
}

TEST(PrRoiPool, MatchesDenseQuadratureOfBilinearSurface) {
  std::mt19937_64 rng(18);
  Tensor<double> f = random_tensor({1, 1, 6, 6}, rng);
  const double bx = 0.7, by = 1.4, bw = 3.3, bh = 2.2;
  Graph<double> g;
  Var y = prroi_pool(g, g.constant(f), g.constant(Tensor<double>({1, 4}, std::vector<double>{bx, by, bw, bh})),
                     {{0, 0}}, 1, 1);
  // Midpoint rule on bilinear samples.
  const int n = 400;
  Tensor<double> pts({n * n, 2});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      pts[2 * (i * n + j)] = bx + (j + 0.5) * bw / n;
      pts[2 * (i * n + j) + 1] = by + (i + 0.5) * bh / n;
    }
  Var s = mean(g, bilinear_sample(g, g.constant(f), g.constant(pts), std::vector<int>(n * n, 0)));
  EXPECT_NEAR(g.value(y)[0], g.value(s)[0], 2e-5);
}

TEST(PrRoiPool, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> pos(-1.0, 6.0), size(0.7, 5.0);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    Tensor<double> boxes({2, 4}, std::vector<double>{pos(rng), pos(rng), size(rng), size(rng), pos(rng), pos(rng),
                                                     size(rng), size(rng)});
    worst = std::max(worst, max_leaf_error({random_tensor({2, 3, 7, 8}, rng), boxes},
                                           [](Graph<double>& g, const std::vector<Var>& v) {
                                             return prroi_pool(g, v[0], v[1], {{0, 0}, {1, 1}, {1, 0}}, 2, 3);
                                           },
                                           100 + k, false, 1e-5));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(PrRoiPool, RejectsDegenerateBox) {
  Graph<double> g;
  EXPECT_THROW(prroi_pool(g, g.constant(Tensor<double>({1, 1, 4, 4})),
                          g.constant(Tensor<double>({1, 4}, std::vector<double>{0, 0, 0, 1})), {{0, 0}}, 2, 2),
               std::invalid_argument);
}

TEST(Backward, LinearAndQuadraticFunctionals) {
  ParamStore<double> store;
  Tensor<double>& p = store.add("p", {5});
  for (int i = 0; i < 5; ++i) p[i] = i - 1.5;
  {
    Graph<double> g;
    g.backward(sum(g, g.param(store, "p")));
    for (double v : store.grad("p").values()) EXPECT_DOUBLE_EQ(v, 1.0);
  }
  store.zero_grad();
  {
    Graph<double> g;
    g.backward(affine(g, sum(g, square(g, g.param(store, "p"))), 0.5, 0.0));
    for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(store.grad("p")[i], p[i]);
  }
}

TEST(Backward, RepeatedCallsAccumulate) {
  ParamStore<double> store;
  store.add("p", {3}).fill(2.0);
  Graph<double> g;
  Var leaf = g.leaf(Tensor<double>({3}, 1.0));
  Var root = sum(g, mul(g, square(g, g.param(store, "p")), leaf));
  g.backward(root);
  const Tensor<double> once = store.grad("p");
  const Tensor<double> leaf_once = g.grad(leaf);
  g.backward(root);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(store.grad("p")[i], 2 * once[i]);
    EXPECT_DOUBLE_EQ(g.grad(leaf)[i], 2 * leaf_once[i]);
  }
}

TEST(Backward, NonScalarRootIsContractError) {
  Graph<double> g;
  Var x = g.leaf(Tensor<double>({2}, 1.0));
  EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Backward, SharedParameterNodeIsReused) {
  ParamStore<double> store;
  store.add("w", {2}).fill(1.0);
  Graph<double> g;
  Var a = g.param(store, "w");
  Var b = g.param(store, "w");
  EXPECT_EQ(a.id, b.id);
  g.backward(sum(g, add(g, a, b)));
  EXPECT_DOUBLE_EQ(store.grad("w")[0], 2.0);
}

TEST(Backward, FrozenParametersReceiveNoGradient) {
  ParamStore<double> store;
  store.add("backbone.w", {2}).fill(1.0);
  store.add("head.w", {2}).fill(1.0);
  store.set_trainable("backbone.", false);
  Graph<double> g;
  g.backward(sum(g, mul(g, g.param(store, "backbone.w"), g.param(store, "head.w"))));
  for (double v : store.grad("backbone.w").values()) EXPECT_EQ(v, 0.0);
  for (double v : store.grad("head.w").values()) EXPECT_EQ(v, 1.0);
}

TEST(Determinism, IdenticalInputsGiveIdenticalOutputs) {
  std::mt19937_64 rng(20);
  const Tensor<float> x = random_tensor({2, 3, 9, 9}, rng).cast<float>();
  const Tensor<float> w = random_tensor({5, 3, 3, 3}, rng).cast<float>();
  auto run = [&] {
    Graph<float> g;
    return g.value(conv2d(g, g.constant(x), g.constant(w), Var{}, Conv2dSpec::same(3, 3)));
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  ParamStore<double> store;
  store.add("p", {3}).fill(0.7);
  Adam<double> opt({1e-3, 0.0});
  for (int i = 0; i < 5; ++i) opt.step(store);
  for (double v : store.value("p").values()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore<double> store;
  store.add("p", {1}).fill(0.0);
  store.grad("p").fill(1.0);
  Adam<double> opt({1e-4, 0.0});
  opt.step(store);
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(store.value("p")[0], -1e-4 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, StepScheduleDecaysEveryFifteenEpochs) {
  EXPECT_DOUBLE_EQ(scheduled_lr(1e-4, 0), 1e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(1e-4, 14), 1e-4);
  EXPECT_NEAR(scheduled_lr(1e-4, 15), 0.2e-4, 1e-18);
  EXPECT_NEAR(scheduled_lr(1e-4, 30), 0.04e-4, 1e-18);
}

TEST(ParamStore, DuplicateNamesRejected) {
  ParamStore<float> store;
  store.add("a", {1});
  EXPECT_THROW(store.add("a", {2}), std::invalid_argument);
}

TEST(Checkpoint, BitExactRoundTrip) {
  ParamStore<float> store;
  std::mt19937_64 rng(21);
  store.add("conv.weight", {4, 3, 3, 3}) = random_tensor({4, 3, 3, 3}, rng).cast<float>();
  store.add("fc.bias", {7}, false) = random_tensor({7}, rng).cast<float>();
  store.add_buffer("bn.running_var", {4}, 1.0f)[2] = -0.0f;
  store.value("fc.bias")[0] = 1e-40f;  // denormal survives
  const auto path = std::filesystem::temp_directory_path() / "comet_ckpt_roundtrip.bin";
  save_checkpoint(path, store, {{"note", "x"}});
  const Checkpoint back = load_checkpoint(path);
  ASSERT_EQ(back.params.entries().size(), 3u);
  for (const auto& e : store.entries()) {
    const auto& o = back.params.entry(e.name);
    ASSERT_EQ(o.value.shape(), e.value.shape());
    EXPECT_EQ(o.trainable, e.trainable);
    EXPECT_EQ(o.buffer, e.buffer);
    EXPECT_EQ(std::memcmp(o.value.data(), e.value.data(), e.value.size() * 4), 0) << e.name;
  }
  EXPECT_EQ(back.metadata.at("note"), "x");
  std::filesystem::remove(path);
}
