#include <gtest/gtest.h>

#include <cmath>

#include "p2p/augment.hpp"

using p2p::Box3D;
using p2p::PointCloud;
using p2p::Rng;
using p2p::Vec3;
using p2p::augment::AugmentConfig;
using p2p::augment::augment_pair;

namespace {

PointCloud random_cloud(Rng& rng, size_t n, double extent) {
  PointCloud c;
  for (size_t i = 0; i < n; ++i)
    c.pts.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                     rng.uniform(-extent, extent)});
  return c;
}

void expect_cloud_eq(const PointCloud& a, const PointCloud& b) {
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.pts[i].x, b.pts[i].x);
    EXPECT_EQ(a.pts[i].y, b.pts[i].y);
    EXPECT_EQ(a.pts[i].z, b.pts[i].z);
  }
}

void expect_box_eq(const Box3D& a, const Box3D& b) {
  EXPECT_EQ(a.cx, b.cx);
  EXPECT_EQ(a.cy, b.cy);
  EXPECT_EQ(a.cz, b.cz);
  EXPECT_EQ(a.w, b.w);
  EXPECT_EQ(a.l, b.l);
  EXPECT_EQ(a.h, b.h);
  EXPECT_EQ(a.yaw, b.yaw);
}

}  // namespace

TEST(Augment, OffConfigIsExactIdentity) {
  Rng data_rng(1);
  PointCloud prev = random_cloud(data_rng, 40, 2.0);
  PointCloud curr = random_cloud(data_rng, 40, 2.0);
  Box3D pb{0, 0, 0, 1.8, 4.2, 1.6, 0.0};
  Box3D cb{0.7, -0.2, 0.05, 1.8, 4.2, 1.6, 0.12};
  PointCloud prev0 = prev, curr0 = curr;
  Box3D pb0 = pb, cb0 = cb;
  Rng rng(77);
  augment_pair(prev, pb, curr, cb, AugmentConfig::off(), rng);
  expect_cloud_eq(prev, prev0);
  expect_cloud_eq(curr, curr0);
  expect_box_eq(pb, pb0);
  expect_box_eq(cb, cb0);
}

TEST(Augment, FlipMirrorsEverything) {
  Rng data_rng(2);
  PointCloud prev = random_cloud(data_rng, 25, 2.0);
  PointCloud curr = random_cloud(data_rng, 25, 2.0);
  Box3D pb{0, 0, 0, 1.8, 4.2, 1.6, 0.0};
  Box3D cb{0.6, 0.3, -0.1, 1.8, 4.2, 1.6, 0.25};
  PointCloud prev0 = prev, curr0 = curr;
  Box3D cb0 = cb;

  p2p::MotionDelta before = p2p::relative_motion(pb, cb);

  AugmentConfig cfg = AugmentConfig::off();
  cfg.flip_prob = 1.0;
  Rng rng(5);
  augment_pair(prev, pb, curr, cb, cfg, rng);

  for (size_t i = 0; i < prev.size(); ++i) {
    EXPECT_EQ(prev.pts[i].x, prev0.pts[i].x);
    EXPECT_EQ(prev.pts[i].y, -prev0.pts[i].y);
    EXPECT_EQ(prev.pts[i].z, prev0.pts[i].z);
    EXPECT_EQ(curr.pts[i].y, -curr0.pts[i].y);
  }
  EXPECT_EQ(cb.cy, -cb0.cy);
  EXPECT_EQ(cb.yaw, p2p::wrap_angle(-cb0.yaw));

  p2p::MotionDelta after = p2p::relative_motion(pb, cb);
  EXPECT_NEAR(after.dx, before.dx, 1e-12);
  EXPECT_NEAR(after.dy, -before.dy, 1e-12);
  EXPECT_NEAR(after.dz, before.dz, 1e-12);
  EXPECT_NEAR(after.dyaw, -before.dyaw, 1e-12);
}

TEST(Augment, RotationKeepsCentersAndRigidity) {
  Rng data_rng(3);
  PointCloud prev = random_cloud(data_rng, 30, 2.0);
  PointCloud curr = random_cloud(data_rng, 30, 2.0);
  Box3D pb{0, 0, 0, 1.8, 4.2, 1.6, 0.0};
  Box3D cb{0.5, -0.4, 0.0, 1.8, 4.2, 1.6, -0.3};
  PointCloud prev0 = prev;
  Box3D pb0 = pb, cb0 = cb;

  AugmentConfig cfg = AugmentConfig::off();
  cfg.rot_max_deg = 5.0;
  const uint64_t seed = 91;
  Rng rng(seed);
  augment_pair(prev, pb, curr, cb, cfg, rng);

  Rng replica(seed);
  replica.uniform();  // flip draw
  const double rot_max = 5.0 * p2p::kPi / 180.0;
  double a_prev = replica.uniform(-rot_max, rot_max);
  double a_curr = replica.uniform(-rot_max, rot_max);

  EXPECT_EQ(pb.cx, pb0.cx);
  EXPECT_EQ(pb.cy, pb0.cy);
  EXPECT_EQ(cb.cx, cb0.cx);
  EXPECT_EQ(pb.yaw, p2p::wrap_angle(pb0.yaw + a_prev));
  EXPECT_EQ(cb.yaw, p2p::wrap_angle(cb0.yaw + a_curr));
  EXPECT_LE(std::abs(pb.yaw - pb0.yaw), rot_max + 1e-12);

  // rigid about the box center: distances to the center are preserved
  for (size_t i = 0; i < prev.size(); ++i) {
    double d0 = (prev0.pts[i] - pb0.center()).norm();
    double d1 = (prev.pts[i] - pb.center()).norm();
    EXPECT_NEAR(d0, d1, 1e-12);
  }
}

TEST(Augment, TranslationMovesBoxAndItsPointsOnly) {
  Box3D pb{0, 0, 0, 2.0, 2.0, 2.0, 0.0};
  Box3D cb{0.5, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0};
  PointCloud prev;
  prev.pts = {{0.1, 0.2, 0.0}, {3.0, 3.0, 1.0}};
  PointCloud curr;
  curr.pts = {{0.5, 0.0, 0.0}, {0.9, 0.3, -0.2}, {4.0, -3.0, 0.4}, {-2.5, 2.5, 0.0}};
  PointCloud prev0 = prev, curr0 = curr;
  Box3D pb0 = pb;

  AugmentConfig cfg = AugmentConfig::off();
  cfg.translate_sigma = {0.3, 0.1, 0.1};
  const uint64_t seed = 17;
  Rng rng(seed);
  augment_pair(prev, pb, curr, cb, cfg, rng);

  Rng replica(seed);
  replica.uniform();
  replica.uniform(-0.0, 0.0);
  replica.uniform(-0.0, 0.0);
  Vec3 shift = {replica.gauss(0.0, 0.3), replica.gauss(0.0, 0.1), replica.gauss(0.0, 0.1)};

  expect_cloud_eq(prev, prev0);
  expect_box_eq(pb, pb0);
  EXPECT_EQ(cb.cx, 0.5 + shift.x);
  EXPECT_EQ(cb.cy, shift.y);
  EXPECT_EQ(cb.cz, shift.z);
  // the two in-box points move with the box, the two outliers stay put
  for (size_t i : {size_t(0), size_t(1)}) {
    EXPECT_EQ(curr.pts[i].x, curr0.pts[i].x + shift.x);
    EXPECT_EQ(curr.pts[i].y, curr0.pts[i].y + shift.y);
    EXPECT_EQ(curr.pts[i].z, curr0.pts[i].z + shift.z);
  }
  for (size_t i : {size_t(2), size_t(3)}) {
    EXPECT_EQ(curr.pts[i].x, curr0.pts[i].x);
    EXPECT_EQ(curr.pts[i].y, curr0.pts[i].y);
    EXPECT_EQ(curr.pts[i].z, curr0.pts[i].z);
  }
}

TEST(Augment, FixedRandomStreamLength) {
  AugmentConfig always = AugmentConfig::off();
  always.flip_prob = 1.0;
  AugmentConfig never = AugmentConfig::off();
  never.flip_prob = 0.0;

  const uint64_t seed = 1234;
  Rng ra(seed), rb(seed);
  {
    Rng data_rng(4);
    PointCloud p1 = random_cloud(data_rng, 10, 1.0), c1 = p1;
    PointCloud p2 = p1, c2 = p1;
    Box3D b{0, 0, 0, 1, 1, 1, 0};
    Box3D b1 = b, b2 = b, b3 = b, b4 = b;
    augment_pair(p1, b1, c1, b2, always, ra);
    augment_pair(p2, b3, c2, b4, never, rb);
  }
  EXPECT_EQ(ra.next_u64(), rb.next_u64());
}

TEST(Augment, SizesNeverChange) {
  Rng rng(55);
  AugmentConfig cfg;  // defaults: everything enabled
  for (int trial = 0; trial < 20; ++trial) {
    Rng data_rng(uint64_t(trial) + 100);
    PointCloud prev = random_cloud(data_rng, 20, 2.5);
    PointCloud curr = random_cloud(data_rng, 20, 2.5);
    Box3D pb{0, 0, 0, 1.8, 4.2, 1.6, 0.0};
    Box3D cb{data_rng.uniform(-1, 1), data_rng.uniform(-1, 1), 0, 1.8, 4.2, 1.6,
             data_rng.uniform(-0.5, 0.5)};
    augment_pair(prev, pb, curr, cb, cfg, rng);
    EXPECT_EQ(pb.w, 1.8);
    EXPECT_EQ(pb.l, 4.2);
    EXPECT_EQ(pb.h, 1.6);
    EXPECT_EQ(cb.w, 1.8);
    EXPECT_EQ(cb.l, 4.2);
    EXPECT_EQ(cb.h, 1.6);
    // the augmented pair still defines a consistent relative-motion target
    p2p::MotionDelta d = p2p::relative_motion(pb, cb);
    Box3D rebuilt = p2p::apply_motion(pb, d, p2p::MotionFrame::canonical);
    EXPECT_NEAR(rebuilt.cx, cb.cx, 1e-12);
    EXPECT_NEAR(rebuilt.cy, cb.cy, 1e-12);
    EXPECT_NEAR(rebuilt.yaw, cb.yaw, 1e-12);
  }
}

TEST(Augment, FlipRateMatchesProbability) {
  AugmentConfig cfg = AugmentConfig::off();
  cfg.flip_prob = 0.3;
  int flips = 0;
  const int trials = 400;
  for (int t = 0; t < trials; ++t) {
    PointCloud prev, curr;
    prev.pts = {{0.5, 1.0, 0.0}};
    curr.pts = {{0.5, 1.0, 0.0}};
    Box3D pb{0, 0, 0, 1, 1, 1, 0}, cb = pb;
    Rng rng(uint64_t(t) * 7919 + 13);
    augment_pair(prev, pb, curr, cb, cfg, rng);
    if (prev.pts[0].y < 0) ++flips;
  }
  double rate = double(flips) / trials;
  EXPECT_GT(rate, 0.22);
  EXPECT_LT(rate, 0.38);
}
