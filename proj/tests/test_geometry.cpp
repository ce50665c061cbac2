// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
#include "nfsim/geometry.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace nfsim;

namespace {

Pose random_pose(Rng& rng) {
  Pose p;
  p.rotation = axis_angle_to_matrix(
      Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)} * rng.uniform(0, 3.0));
  p.translation = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
  return p;
}

}  // namespace

TEST(PoseType, RandomAxisAngleIsValidRotation) {
  Rng rng(3);
  for (int i = 0; i < 100; i++) {
    Pose p = random_pose(rng);
    EXPECT_TRUE(p.is_valid());
  }
}

TEST(PoseType, AxisAngleRoundTrip) {
  Rng rng(4);
  for (int i = 0; i < 100; i++) {
    Vec3 axis = Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}.normalized();
    Vec3 aa = axis * rng.uniform(1e-6, M_PI - 1e-3);  // canonical range
    Vec3 back = matrix_to_axis_angle(axis_angle_to_matrix(aa));
    EXPECT_NEAR(back.x, aa.x, 1e-9);
    EXPECT_NEAR(back.y, aa.y, 1e-9);
    EXPECT_NEAR(back.z, aa.z, 1e-9);
  }
  // beyond pi the vector is not unique; the rotation itself must round-trip
  Vec3 aa{2.0, -1.5, 2.5};
  Mat3 m = axis_angle_to_matrix(aa);
  Mat3 m2 = axis_angle_to_matrix(matrix_to_axis_angle(m));
  for (int i = 0; i < 9; i++) EXPECT_NEAR(m2.m[i], m.m[i], 1e-9);
}

TEST(GenerateRay, PrincipalPointIsOpticalAxis) {
  Camera cam{40.0, 40.0, 32.5, 24.5, 64, 48};
  Ray r = generate_ray(cam, Pose::identity(), 32.0, 24.0);  // center hits (cx, cy)
  EXPECT_NEAR(r.direction.x, 0.0, 1e-12);
  EXPECT_NEAR(r.direction.y, 0.0, 1e-12);
  EXPECT_NEAR(r.direction.z, 1.0, 1e-12);
}

TEST(GenerateRay, OneFocalLengthOffAxis) {
  Camera cam{40.0, 40.0, 32.5, 24.5, 128, 48};
  // pixel center at cx + fx -> direction proportional to (1, 0, 1)
  Ray r = generate_ray(cam, Pose::identity(), 72.0, 24.0);
  double s = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(r.direction.x, s, 1e-12);
  EXPECT_NEAR(r.direction.y, 0.0, 1e-12);
  EXPECT_NEAR(r.direction.z, s, 1e-12);
}

TEST(GenerateRay, RotationEquivariance) {
  Camera cam{50.0, 45.0, 31.5, 23.5, 64, 48};
  Rng rng(17);
  for (int i = 0; i < 20; i++) {
    Pose pose = random_pose(rng);
    double px = rng.uniform(0, 64), py = rng.uniform(0, 48);
    Ray base = generate_ray(cam, Pose::identity(), px, py);
    Ray moved = generate_ray(cam, pose, px, py);
    Vec3 expect = pose.apply_dir(base.direction);
    EXPECT_NEAR(moved.direction.x, expect.x, 1e-12);
    EXPECT_NEAR(moved.direction.y, expect.y, 1e-12);
    EXPECT_NEAR(moved.direction.z, expect.z, 1e-12);
    EXPECT_NEAR((moved.origin - pose.translation).norm(), 0.0, 1e-12);
  }
}

TEST(GenerateRay, OutOfBoundsPixelRejected) {
  Camera cam{40.0, 40.0, 32.5, 24.5, 64, 48};
  EXPECT_THROW(generate_ray(cam, Pose::identity(), 64.0, 0.0), std::invalid_argument);
  EXPECT_THROW(generate_ray(cam, Pose::identity(), 0.0, -1.0), std::invalid_argument);
}

TEST(RayBox, AxisAlignedSlabArithmetic) {
  Ray r{{0, 0, -5}, {0, 0, 1}};
  OrientedBox box;
  box.half_extents = {1, 1, 1};
  auto hit = ray_box_intersect(r, box);
  ASSERT_TRUE(hit.has_value());
  EXPECT_NEAR(hit->t_in, 4.0, 1e-12);
  EXPECT_NEAR(hit->t_out, 6.0, 1e-12);
}

TEST(RayBox, OriginInsideClampsEntryToZero) {
  Ray r{{0.2, -0.3, 0.1}, {0, 0, 1}};
  OrientedBox box;
  box.half_extents = {1, 1, 1};
  auto hit = ray_box_intersect(r, box);
  ASSERT_TRUE(hit.has_value());
  EXPECT_DOUBLE_EQ(hit->t_in, 0.0);
  EXPECT_NEAR(hit->t_out, 0.9, 1e-12);
}

TEST(RayBox, BoxBehindOriginMisses) {
  Ray r{{0, 0, 5}, {0, 0, 1}};
  OrientedBox box;
  box.half_extents = {1, 1, 1};
  EXPECT_FALSE(ray_box_intersect(r, box).has_value());
}

TEST(RayBox, DegenerateTangentCountsAsMiss) {
  // touches exactly the (x=1, z=1) edge of the unit cube at a single point
  Ray r{{2, 0, 0}, Vec3{-1, 0, 1}.normalized()};
  OrientedBox box;
  box.half_extents = {1, 1, 1};
  EXPECT_FALSE(ray_box_intersect(r, box).has_value());
}

// acceptance-scale oracle agreement (criterion-sized run lives in the
// acceptance suite; this is the smaller per-module gate)
TEST(RayBox, MarchingOracleAgreement) {
  auto cases = oracle::random_ray_box_cases(800, 2024);
  int hits = 0;
  for (auto& c : cases) {
    auto slab = ray_box_intersect(c.ray, c.box);
    auto march = oracle::marching_ray_box(c.ray, c.box);
    ASSERT_EQ(slab.has_value(), march.hit);
    if (slab) {
      hits++;
      EXPECT_NEAR(slab->t_in, march.t_in, 1e-3);
      EXPECT_NEAR(slab->t_out, march.t_out, 1e-3);
    }
  }
  EXPECT_GT(hits, 100);  // generator must produce a healthy hit mix
}

TEST(RayBox, RigidInvariance) {
  Rng rng(55);
  auto cases = oracle::random_ray_box_cases(200, 77);
  for (auto& c : cases) {
    Pose g = random_pose(rng);
    Ray moved_ray{g.apply(c.ray.origin), g.apply_dir(c.ray.direction)};
    OrientedBox moved_box = c.box;
    moved_box.pose = g.compose(c.box.pose);
    auto a = ray_box_intersect(c.ray, c.box);
    auto b = ray_box_intersect(moved_ray, moved_box);
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) {
      EXPECT_NEAR(a->t_in, b->t_in, 1e-9);
      EXPECT_NEAR(a->t_out, b->t_out, 1e-9);
    }
  }
}

TEST(InstanceTransform, IdentityBoxLeavesRayUnchanged) {
  OrientedBox box;
  box.half_extents = {1, 1, 1};
  Ray r{{0.3, -0.2, 5}, Vec3{0.1, 0.2, -1}.normalized()};
  Ray out = world_to_instance(r, box);
  EXPECT_NEAR((out.origin - r.origin).norm(), 0, 1e-12);
  EXPECT_NEAR((out.direction - r.direction).norm(), 0, 1e-12);
}

TEST(InstanceTransform, TranslatedBoxShiftsOrigin) {
  OrientedBox box;
  box.half_extents = {1, 1, 1};
  box.pose.translation = {5, 0, 0};
  Ray r{{0, 0, 0}, {0, 0, 1}};
  Ray out = world_to_instance(r, box);
  EXPECT_NEAR(out.origin.x, -5.0, 1e-12);
  EXPECT_NEAR(out.origin.y, 0.0, 1e-12);
  EXPECT_NEAR(out.origin.z, 0.0, 1e-12);
}

TEST(InstanceTransform, RandomRoundTripIsIdentity) {
  Rng rng(91);
  for (int i = 0; i < 200; i++) {
    OrientedBox box;
    box.pose = random_pose(rng);
    box.half_extents = {rng.uniform(0.3, 3), rng.uniform(0.3, 3), rng.uniform(0.3, 3)};
    Ray r{{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)},
          Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}.normalized()};
    Ray round = instance_to_world(world_to_instance(r, box), box);
    EXPECT_NEAR((round.origin - r.origin).norm(), 0, 1e-9);
    EXPECT_NEAR((round.direction - r.direction).norm(), 0, 1e-9);
    EXPECT_NEAR(round.direction.norm(), 1.0, 1e-12);
  }
}

TEST(Contract, InsideUnitBallIsIdentity) {
  Vec3 x{0.5, 0, 0};
  Vec3 y = contract(x);
  EXPECT_DOUBLE_EQ(y.x, 0.5);
  EXPECT_DOUBLE_EQ(y.y, 0.0);
  EXPECT_DOUBLE_EQ(y.z, 0.0);
}

TEST(Contract, OutsideMapsToTwoMinusInverse) {
  Vec3 y = contract({2, 0, 0});
  EXPECT_NEAR(y.x, 1.5, 1e-12);
  EXPECT_NEAR(y.y, 0.0, 1e-12);
}

TEST(Contract, NormAlwaysBelowTwo) {
  Rng rng(12);
  for (int i = 0; i < 1000; i++) {
    double scale = std::pow(10.0, rng.uniform(-2, 6));
    Vec3 x = Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}.normalized() * scale;
    EXPECT_LT(contract(x).norm(), 2.0);
  }
}

TEST(Contract, ContinuousAtUnitSphereAndMonotoneInRadius) {
  Vec3 dir = Vec3{0.3, -0.5, 0.8}.normalized();
  double just_in = contract(dir * (1 - 1e-9)).norm();
  double just_out = contract(dir * (1 + 1e-9)).norm();
  EXPECT_NEAR(just_in, just_out, 1e-8);

  double prev = 0;
  for (double r = 0.05; r < 50.0; r *= 1.3) {
    double cur = contract(dir * r).norm();
    EXPECT_GT(cur, prev);
    prev = cur;
  }
}
