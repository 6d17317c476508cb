#include <gtest/gtest.h>

#include <cmath>

#include "comet/boxgeom.hpp"
#include "comet/oracles.hpp"

using namespace comet;

TEST(Iou, IdenticalBoxes) { EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0); }

TEST(Iou, DisjointBoxes) { EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {20, 20, 5, 5}), 0.0); }

TEST(Iou, HalfShiftMatchesRasterCount) {
  // 50 shared cells over 150 covered cells.
  const auto r = oracle::raster_iou(0, 0, 10, 10, 5, 0, 10, 10);
  ASSERT_EQ(r.num, 50);
  ASSERT_EQ(r.den, 150);
  EXPECT_EQ(iou({0, 0, 10, 10}, {5, 0, 10, 10}), 50.0 / 150.0);
}

TEST(Iou, RejectsDegenerateBoxes) {
  EXPECT_THROW(iou({0, 0, 0, 10}, {0, 0, 1, 1}), InvalidBox);
  EXPECT_THROW(iou({0, 0, 1, 1}, {0, 0, 1, -2}), InvalidBox);
}

TEST(Iou, SymmetricBoundedAndExactOnIntegerBoxes) {
  Rng rng(7);
  std::uniform_int_distribution<int> pos(-20, 20), size(1, 25);
  for (int k = 0; k < 2000; ++k) {
    const int ax = pos(rng), ay = pos(rng), aw = size(rng), ah = size(rng);
    const int bx = pos(rng), by = pos(rng), bw = size(rng), bh = size(rng);
    const BoxXYWH a{double(ax), double(ay), double(aw), double(ah)};
    const BoxXYWH b{double(bx), double(by), double(bw), double(bh)};
    const double v = iou(a, b);
    const auto r = oracle::raster_iou(ax, ay, aw, ah, bx, by, bw, bh);
    ASSERT_EQ(v, double(r.num) / double(r.den));
    ASSERT_EQ(v, iou(b, a));
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
    if (v == 1.0) ASSERT_EQ(a, b);
  }
}

TEST(Cle, IdentityIsZero) {
  const auto c = cle_normalized({3, 4, 5, 6}, {3, 4, 5, 6});
  EXPECT_EQ(c.dx, 0.0);
  EXPECT_EQ(c.dy, 0.0);
}

TEST(Cle, HandEvaluatedOffset) {
  const auto c = cle_normalized({10, 10, 20, 20}, {14, 12, 20, 20});
  EXPECT_DOUBLE_EQ(c.dx, -0.2);
  EXPECT_DOUBLE_EQ(c.dy, -0.1);
  const auto m = cle_normalized({10, 10, 20, 20}, {6, 8, 20, 20});
  EXPECT_DOUBLE_EQ(m.dx, 0.2);
  EXPECT_DOUBLE_EQ(m.dy, 0.1);
}

TEST(Cle, ScaleInvariant) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(1.0, 40.0);
  for (int k = 0; k < 200; ++k) {
    const BoxXYWH g{u(rng), u(rng), u(rng), u(rng)};
    const BoxXYWH p{u(rng), u(rng), u(rng), u(rng)};
    const double s = u(rng) / 7.0;
    const auto c1 = cle_normalized(g, p);
    const auto c2 = cle_normalized({g.x * s, g.y * s, g.w * s, g.h * s}, {p.x * s, p.y * s, p.w * s, p.h * s});
    EXPECT_NEAR(c1.dx, c2.dx, 1e-12);
    EXPECT_NEAR(c1.dy, c2.dy, 1e-12);
  }
}

TEST(Cle, RejectsDegenerateGroundTruth) { EXPECT_THROW(cle_normalized({0, 0, 0, 1}, {0, 0, 1, 1}), InvalidBox); }

TEST(GaussianJitter, ZeroSigmaIsIdentity) {
  Rng rng(1);
  const BoxXYWH b{1.5, 2.25, 10.0, 7.0};
  EXPECT_EQ(gaussian_jitter(b, {0, 0, 0, 0}, rng), b);
}

TEST(GaussianJitter, ReproducibleWithSameSeed) {
  Rng a(99), b(99);
  const BoxXYWH box{0, 0, 10, 10};
  for (int i = 0; i < 10; ++i) EXPECT_EQ(gaussian_jitter(box, {2, 2, 1, 1}, a), gaussian_jitter(box, {2, 2, 1, 1}, b));
}

TEST(GaussianJitter, SampleMeanWithinThreeStandardErrors) {
  Rng rng(2024);
  const int n = 10000;
  const BoxXYWH box{50, 50, 40, 40};  // large enough that clamping never triggers
  const Vec4 sigma{2, 2, 1, 1};
  Vec4 acc{0, 0, 0, 0};
  for (int i = 0; i < n; ++i) {
    const BoxXYWH j = gaussian_jitter(box, sigma, rng);
    acc[0] += j.x - box.x;
    acc[1] += j.y - box.y;
    acc[2] += j.w - box.w;
    acc[3] += j.h - box.h;
  }
  for (int k = 0; k < 4; ++k) EXPECT_LT(std::abs(acc[k] / n), 3 * sigma[k] / std::sqrt(double(n))) << k;
}

TEST(GaussianJitter, ClampsToMinimumSize) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const BoxXYWH j = gaussian_jitter({0, 0, 1.5, 1.5}, {0, 0, 5, 5}, rng);
    ASSERT_GE(j.w, kMinBoxSize);
    ASSERT_GE(j.h, kMinBoxSize);
  }
}

TEST(Proposals, ReferenceThresholdHolds) {
  Rng rng(11);
  const BoxXYWH b{30, 40, 24, 16};
  auto cfg = JitterConfig::reference();
  for (int rep = 0; rep < 50; ++rep) {
    const ProposalSet ps = generate_proposals(b, cfg, rng);
    ASSERT_EQ(ps.boxes.size(), 7u);
    for (std::size_t i = 0; i < ps.boxes.size(); ++i) {
      if (!ps.exhausted[i]) ASSERT_GE(iou(b, ps.boxes[i]), 0.8);
    }
  }
}

TEST(Proposals, ZeroJitterReturnsSource) {
  Rng rng(1);
  JitterConfig cfg = JitterConfig::reference();
  cfg.sigma_pool = {{0, 0, 0, 0}};
  const BoxXYWH b{3, 4, 10, 12};
  const ProposalSet ps = generate_proposals(b, cfg, rng);
  EXPECT_EQ(ps.exhausted_count(), 0u);
  for (const auto& p : ps.boxes) {
    EXPECT_EQ(p, b);
    EXPECT_EQ(iou(b, p), 1.0);
  }
}

TEST(Proposals, ImpossibleThresholdExhaustsEverySlot) {
  Rng rng(1);
  JitterConfig cfg = JitterConfig::test();
  cfg.threshold = 1.0;
  const ProposalSet ps = generate_proposals({0, 0, 20, 20}, cfg, rng);
  EXPECT_EQ(ps.exhausted_count(), ps.boxes.size());
}

TEST(Proposals, InvalidConfigRejected) {
  Rng rng(1);
  JitterConfig cfg = JitterConfig::test();
  cfg.sigma_pool.clear();
  EXPECT_THROW(generate_proposals({0, 0, 5, 5}, cfg, rng), std::invalid_argument);
}

TEST(CropSpec, WindowArithmetic) {
  const CropSpec c({0, 0, 10, 10}, 5.0, 288);
  EXPECT_DOUBLE_EQ(c.side(), 50.0);
  EXPECT_DOUBLE_EQ(c.left() + c.side() / 2, 5.0);
  EXPECT_DOUBLE_EQ(c.top() + c.side() / 2, 5.0);
}

TEST(CropSpec, UnitFactorOnSquareBoxIsTheBox) {
  const BoxXYWH b{7, 9, 12, 12};
  const CropSpec c(b, 1.0, 64);
  EXPECT_DOUBLE_EQ(c.left(), b.x);
  EXPECT_DOUBLE_EQ(c.top(), b.y);
  EXPECT_DOUBLE_EQ(c.side(), b.w);
  const BoxXYWH in_crop = c.to_crop(b);
  EXPECT_NEAR(in_crop.x, 0.0, 1e-12);
  EXPECT_NEAR(in_crop.w, 64.0, 1e-12);
}

TEST(CropSpec, TransformsAreInverse) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(1.0, 100.0);
  for (int k = 0; k < 100; ++k) {
    const CropSpec c({u(rng), u(rng), u(rng), u(rng)}, 5.0, 144);
    const BoxXYWH b{u(rng), u(rng), u(rng), u(rng)};
    const BoxXYWH r = c.to_source(c.to_crop(b));
    EXPECT_NEAR(r.x, b.x, 1e-9);
    EXPECT_NEAR(r.y, b.y, 1e-9);
    EXPECT_NEAR(r.w, b.w, 1e-9);
    EXPECT_NEAR(r.h, b.h, 1e-9);
  }
}

TEST(CropSpec, RejectsDegenerateBox) { EXPECT_THROW(CropSpec({0, 0, 0, 4}, 5.0, 288), InvalidBox); }

TEST(ClampToFrame, KeepsBoxInside) {
  const BoxXYWH c = clamp_to_frame({-5, 90, 20, 30}, 100, 100);
  EXPECT_DOUBLE_EQ(c.x, 0.0);
  EXPECT_DOUBLE_EQ(c.w, 15.0);
  EXPECT_DOUBLE_EQ(c.y, 90.0);
  EXPECT_DOUBLE_EQ(c.h, 10.0);
  const BoxXYWH far = clamp_to_frame({500, 500, 4, 4}, 100, 100);
  EXPECT_GE(far.w, 1.0);
  EXPECT_LE(far.x + far.w, 100.0);
}
