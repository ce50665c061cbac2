// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Rays, rigid poses, oriented instance boxes, slab intersection, the
// world<->instance transforms, and the unbounded scene contraction.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "nfsim/core.hpp"

namespace nfsim {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 cwise_mul(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
  Vec3 cwise_div(const Vec3& o) const { return {x / o.x, y / o.y, z / o.z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    require(n > 0, "normalized: zero vector");
    return *this / n;
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Row-major 3x3.
struct Mat3 {
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }

  double at(int r, int c) const { return m[r * 3 + c]; }
  double& at(int r, int c) { return m[r * 3 + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) {
        double s = 0;
        for (int k = 0; k < 3; k++) s += at(i, k) * o.at(k, j);
        r.at(i, j) = s;
      }
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) r.at(i, j) = at(j, i);
    return r;
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

// Rodrigues; axis-angle vector whose norm is the rotation angle.
inline Mat3 axis_angle_to_matrix(const Vec3& aa) {
  double theta = aa.norm();
  Mat3 r = Mat3::identity();
  if (theta < 1e-12) return r;
  Vec3 k = aa / theta;
  double c = std::cos(theta), s = std::sin(theta), t = 1 - c;
  r.at(0, 0) = c + k.x * k.x * t;
  r.at(0, 1) = k.x * k.y * t - k.z * s;
  r.at(0, 2) = k.x * k.z * t + k.y * s;
  r.at(1, 0) = k.y * k.x * t + k.z * s;
  r.at(1, 1) = c + k.y * k.y * t;
  r.at(1, 2) = k.y * k.z * t - k.x * s;
  r.at(2, 0) = k.z * k.x * t - k.y * s;
  r.at(2, 1) = k.z * k.y * t + k.x * s;
  r.at(2, 2) = c + k.z * k.z * t;
  return r;
}

inline Vec3 matrix_to_axis_angle(const Mat3& r) {
  double tr = r.at(0, 0) + r.at(1, 1) + r.at(2, 2);
  double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  double theta = std::acos(c);
  if (theta < 1e-12) return {0, 0, 0};
  if (theta > M_PI - 1e-6) {
    // near pi: extract axis from the symmetric part
    Vec3 axis{std::sqrt(std::max(0.0, (r.at(0, 0) + 1) / 2)),
              std::sqrt(std::max(0.0, (r.at(1, 1) + 1) / 2)),
              std::sqrt(std::max(0.0, (r.at(2, 2) + 1) / 2))};
    if (r.at(0, 1) + r.at(1, 0) < 0) axis.y = -axis.y;
    if (r.at(0, 2) + r.at(2, 0) < 0) axis.z = -axis.z;
    return axis.normalized() * theta;
  }
  double s = 2.0 * std::sin(theta);
  Vec3 axis{(r.at(2, 1) - r.at(1, 2)) / s, (r.at(0, 2) - r.at(2, 0)) / s,
            (r.at(1, 0) - r.at(0, 1)) / s};
  return axis * theta;
}

// Rigid transform: x_world = R * x_local + t.
struct Pose {
  Mat3 rotation;
  Vec3 translation;

  static Pose identity() { return {}; }

  // RtR = I and det = +1, both to 1e-9
  bool is_valid(double tol = 1e-9) const {
    Mat3 rtr = rotation.transposed() * rotation;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) {
        double want = i == j ? 1.0 : 0.0;
        if (std::abs(rtr.at(i, j) - want) > tol) return false;
      }
    return std::abs(rotation.det() - 1.0) <= tol;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_dir(const Vec3& d) const { return rotation * d; }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transposed();
    inv.translation = inv.rotation * (translation * -1.0);
    return inv;
  }

  // this ∘ other: apply `other` first
  Pose compose(const Pose& other) const {
    Pose r;
    r.rotation = rotation * other.rotation;
    r.translation = rotation * other.translation + translation;
    return r;
  }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit

  Vec3 at(double t) const { return origin + direction * t; }
};

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    require(fx > 0 && fy > 0, "camera: focal lengths must be positive");
    require(cx >= 0 && cx < width && cy >= 0 && cy < height,
            "camera: principal point outside image");
  }
};

struct OrientedBox {
  Pose pose;          // instance frame in world
  Vec3 half_extents;  // strictly positive
  int category = -1;
  int instance_id = -1;

  void validate() const {
    require(half_extents.x > 0 && half_extents.y > 0 && half_extents.z > 0,
            "box: half-extents must be strictly positive");
  }
};

// Pixel centers sit at +0.5. Camera frame: +x right, +y down, +z forward.
inline Ray generate_ray(const Camera& cam, const Pose& cam_to_world, double px, double py) {
  require(px >= 0 && px < cam.width && py >= 0 && py < cam.height,
          "generate_ray: pixel (" + std::to_string(px) + ", " + std::to_string(py) +
              ") outside " + std::to_string(cam.width) + "x" + std::to_string(cam.height));
  Vec3 dir_cam{(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, 1.0};
  Ray r;
  r.origin = cam_to_world.translation;
  r.direction = cam_to_world.apply_dir(dir_cam).normalized();
  return r;
}

struct BoxInterval {
  double t_in = 0;
  double t_out = 0;
};

// Slab method in the box frame. Entering distance clamps to 0 when the origin
// is inside; tangent grazes (interval shorter than 1e-9) count as misses.
inline std::optional<BoxInterval> ray_box_intersect(const Ray& ray, const OrientedBox& box) {
  Pose world_to_box = box.pose.inverse();
  Vec3 o = world_to_box.apply(ray.origin);
  Vec3 d = world_to_box.apply_dir(ray.direction);

  double t_lo = -std::numeric_limits<double>::infinity();
  double t_hi = std::numeric_limits<double>::infinity();
  const double od[3] = {o.x, o.y, o.z};
  const double dd[3] = {d.x, d.y, d.z};
  const double hh[3] = {box.half_extents.x, box.half_extents.y, box.half_extents.z};
  for (int a = 0; a < 3; a++) {
    if (std::abs(dd[a]) < 1e-15) {
      if (od[a] < -hh[a] || od[a] > hh[a]) return std::nullopt;
      continue;
    }
    double inv = 1.0 / dd[a];
    double t0 = (-hh[a] - od[a]) * inv;
    double t1 = (hh[a] - od[a]) * inv;
    if (t0 > t1) std::swap(t0, t1);
    t_lo = std::max(t_lo, t0);
    t_hi = std::min(t_hi, t1);
  }
  if (t_hi <= t_lo + 1e-9) return std::nullopt;
  if (t_hi <= 0) return std::nullopt;  // box entirely behind the origin
  BoxInterval iv;
  iv.t_in = std::max(t_lo, 0.0);
  iv.t_out = t_hi;
  if (iv.t_out - iv.t_in <= 1e-9) return std::nullopt;
  return iv;
}

// Instance-frame ray, additionally scaled per axis so the box becomes the
// canonical [-1,1]^3 cube. Direction is re-normalized after scaling.
inline Ray world_to_instance(const Ray& ray, const OrientedBox& box) {
  Pose inv = box.pose.inverse();
  Ray r;
  r.origin = inv.apply(ray.origin).cwise_div(box.half_extents);
  r.direction = inv.apply_dir(ray.direction).cwise_div(box.half_extents).normalized();
  return r;
}

inline Ray instance_to_world(const Ray& ray, const OrientedBox& box) {
  Ray r;
  r.origin = box.pose.apply(ray.origin.cwise_mul(box.half_extents));
  r.direction = box.pose.apply_dir(ray.direction.cwise_mul(box.half_extents)).normalized();
  return r;
}

// Point mapping used by the renderer: world point -> canonical instance cube.
inline Vec3 world_point_to_instance(const Vec3& p, const Pose& world_to_box,
                                    const Vec3& half_extents) {
  return world_to_box.apply(p).cwise_div(half_extents);
}

// Radial contraction for unbounded scenes: identity inside the unit ball,
// norm 2 - 1/|x| outside. Output norm is always < 2.
inline Vec3 contract(const Vec3& x) {
  double n = x.norm();
  if (n <= 1.0) return x;
  return x * ((2.0 - 1.0 / n) / n);
}

// Analytic inverse of contract(); defined on the open ball of radius 2.
inline Vec3 uncontract(const Vec3& y) {
  double n = y.norm();
  if (n <= 1.0) return y;
  require(n < 2.0, "uncontract: input norm must be < 2");
  double r = 1.0 / (2.0 - n);
  return y * (r / n);
}

inline bool point_in_box(const Vec3& p_world, const OrientedBox& box, double eps = 0.0) {
  Vec3 local = box.pose.inverse().apply(p_world);
  return std::abs(local.x) <= box.half_extents.x + eps &&
         std::abs(local.y) <= box.half_extents.y + eps &&
         std::abs(local.z) <= box.half_extents.z + eps;
}

}  // namespace nfsim
