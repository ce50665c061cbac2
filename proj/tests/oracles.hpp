// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations used only by tests. These stay
// independent of the library code paths they validate.
#pragma once

#include <cmath>
#include <vector>

#include "nfsim/core.hpp"
#include "nfsim/geometry.hpp"

namespace nfsim::oracle {

struct MarchHit {
  bool hit = false;
  double t_in = 0;
  double t_out = 0;
};

// Fine-stepping ray/box oracle: march the ray at `step_frac` of the span,
// test containment pointwise, then bisect the boundary crossings.
inline MarchHit marching_ray_box(const Ray& ray, const OrientedBox& box,
                                 double step_frac = 1e-4) {
  Vec3 to_center = box.pose.translation - ray.origin;
  double diag = box.half_extents.norm();
  double span = 2.0 * (to_center.norm() + diag + 1.0);
  double step = step_frac * span;

  auto inside = [&](double t) { return point_in_box(ray.at(t), box); };

  int n = int(span / step) + 1;
  int first_in = -1, last_in = -1;
  for (int i = 0; i <= n; i++) {
    if (inside(i * step)) {
      if (first_in < 0) first_in = i;
      last_in = i;
    } else if (first_in >= 0) {
      break;  // convex: once exited, never re-enters
    }
  }
  MarchHit res;
  if (first_in < 0) return res;

  auto bisect = [&](double t_out_side, double t_in_side) {
    for (int i = 0; i < 80; i++) {
      double mid = 0.5 * (t_out_side + t_in_side);
      if (inside(mid))
        t_in_side = mid;
      else
        t_out_side = mid;
    }
    return 0.5 * (t_out_side + t_in_side);
  };

  double entry;
  if (first_in == 0) {
    entry = 0.0;  // origin inside
  } else {
    entry = bisect((first_in - 1) * step, first_in * step);
  }
  double exit = bisect((last_in + 1) * step, last_in * step);
  if (exit - entry <= 1e-9) return res;  // tangent graze counts as miss
  res.hit = true;
  res.t_in = entry;
  res.t_out = exit;
  return res;
}

struct RayBoxCase {
  Ray ray;
  OrientedBox box;
};

inline std::vector<RayBoxCase> random_ray_box_cases(int count, uint64_t seed) {
  std::vector<RayBoxCase> cases;
  cases.reserve(count);
  Rng rng(derive_seed(seed, 0xb0c5));
  for (int i = 0; i < count; i++) {
    RayBoxCase c;
    c.box.pose.rotation = axis_angle_to_matrix(
        Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)} * rng.uniform(0, 3.0));
    c.box.pose.translation = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    c.box.half_extents = {rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)};
    c.box.category = 0;
    c.box.instance_id = i;

    c.ray.origin = {rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8)};
    if (i % 2 == 0) {
      // aim near the box so roughly half the cases hit
      Vec3 target = c.box.pose.translation +
                    Vec3{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
      c.ray.direction = (target - c.ray.origin).normalized();
    } else {
      c.ray.direction =
          Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}.normalized();
    }
    cases.push_back(c);
  }
  return cases;
}

}  // namespace nfsim::oracle
