// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale verification substrate: a procedural driving-style scene made
// of primitives with closed-form ray intersections, rendered exactly by an
// analytic compositor. The same primitives can be pinned into a scene graph
// as function-backed fields for end-to-end cross-checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <vector>

#include "nfsim/config.hpp"
#include "nfsim/geometry.hpp"
#include "nfsim/image.hpp"
#include "nfsim/renderer.hpp"
#include "nfsim/scene_graph.hpp"

namespace nfsim {

// Opaque primitives terminate the ray at the entry face; translucent ones
// composite exactly through exp(-sigma * length).
struct ScenePrimitive {
  OrientedBox box;
  bool opaque = true;
  double sigma = 0.0;  // translucent density when !opaque
  Vec3 albedo{0.5, 0.5, 0.5};
  bool textured = false;  // ground texture: albedo from world (x, z)
  int category = 1;
  int instance_id = -1;  // >= 0 marks a tracked moving box
};

struct SceneModel {
  std::vector<ScenePrimitive> statics;
  // instance id -> frame -> world box; appearance shared per instance
  std::map<int, std::map<int, OrientedBox>> trajectories;
  std::map<int, ScenePrimitive> instance_prims;  // geometry-free template per id
  std::function<Vec3(const Vec3&)> sky;
  std::function<Vec3(double, double)> ground_texture;  // world (x, z) -> rgb
  SceneBounds bounds;
  int classes = 4;
  int sky_class = 0;

  std::vector<ScenePrimitive> primitives_for_frame(int frame, bool include_instances) const {
    std::vector<ScenePrimitive> prims = statics;
    if (include_instances) {
      for (const auto& [id, traj] : trajectories) {
        auto it = traj.find(frame);
        if (it == traj.end()) continue;
        ScenePrimitive p = instance_prims.at(id);
        p.box = it->second;
        p.box.instance_id = id;
        prims.push_back(p);
      }
    }
    return prims;
  }

  Vec3 albedo_at(const ScenePrimitive& p, const Vec3& world) const {
    return p.textured ? ground_texture(world.x, world.z) : p.albedo;
  }

  // point queries for ground-truth pinning
  double static_sigma_at(const Vec3& world, double opaque_sigma) const {
    double s = 0;
    for (const auto& p : statics)
      if (point_in_box(world, p.box)) s += p.opaque ? opaque_sigma : p.sigma;
    return s;
  }

  Vec3 static_albedo_at(const Vec3& world) const {
    for (const auto& p : statics)
      if (point_in_box(world, p.box)) return albedo_at(p, world);
    return {0, 0, 0};
  }
};

struct OraclePixel {
  Vec3 rgb{0, 0, 0};
  double depth = 0;
  std::vector<double> class_mass;  // length = classes (sky included)
  double sky_weight = 0;
};

// Exact compositing through sorted piecewise-constant intervals.
inline OraclePixel oracle_render_ray(const SceneModel& model, int frame, const Ray& ray,
                                     bool include_instances = true) {
  struct Interval {
    double t_in, t_out;
    const ScenePrimitive* prim;
  };
  auto prims = model.primitives_for_frame(frame, include_instances);
  std::vector<Interval> ivs;
  for (const auto& p : prims) {
    auto hit = ray_box_intersect(ray, p.box);
    if (hit) ivs.push_back({hit->t_in, hit->t_out, &p});
  }

  OraclePixel out;
  out.class_mass.assign(model.classes, 0.0);
  double T = 1.0;

  // event walk over interval boundaries
  std::vector<double> events{0.0};
  for (auto& iv : ivs) {
    events.push_back(iv.t_in);
    events.push_back(iv.t_out);
  }
  std::sort(events.begin(), events.end());
  events.erase(std::unique(events.begin(), events.end()), events.end());

  for (size_t e = 0; T > 1e-12 && e + 1 <= events.size(); e++) {
    double seg_lo = events[e];
    double seg_hi = e + 1 < events.size() ? events[e + 1] : std::numeric_limits<double>::infinity();

    // opaque surface starting exactly here terminates the ray
    const ScenePrimitive* hit_opaque = nullptr;
    for (auto& iv : ivs)
      if (iv.prim->opaque && iv.t_in == seg_lo && (!hit_opaque || iv.t_in < seg_lo + 1e-12))
        hit_opaque = iv.prim;
    if (hit_opaque) {
      Vec3 c = model.albedo_at(*hit_opaque, ray.at(seg_lo));
      out.rgb = out.rgb + c * T;
      out.depth += T * seg_lo;
      out.class_mass[hit_opaque->category] += T;
      T = 0.0;
      break;
    }
    if (!std::isfinite(seg_hi)) break;

    // translucent mix active on (seg_lo, seg_hi)
    double sigma_total = 0;
    Vec3 weighted_albedo{0, 0, 0};
    double mass_per_class[16] = {0};
    for (auto& iv : ivs) {
      if (iv.t_in <= seg_lo && iv.t_out >= seg_hi && !iv.prim->opaque) {
        sigma_total += iv.prim->sigma;
        weighted_albedo =
            weighted_albedo + model.albedo_at(*iv.prim, ray.at(0.5 * (seg_lo + seg_hi))) *
                                  iv.prim->sigma;
        mass_per_class[iv.prim->category] += iv.prim->sigma;
      }
    }
    if (sigma_total > 0) {
      const double len = seg_hi - seg_lo;
      const double absorb = 1.0 - std::exp(-sigma_total * len);
      Vec3 cmix = weighted_albedo / sigma_total;
      out.rgb = out.rgb + cmix * (T * absorb);
      // exact expected depth through the segment
      double depth_int =
          seg_lo * absorb + (absorb / sigma_total - len * std::exp(-sigma_total * len));
      out.depth += T * depth_int;
      for (int k = 0; k < model.classes; k++)
        out.class_mass[k] += T * absorb * (mass_per_class[k] / sigma_total);
      T *= std::exp(-sigma_total * len);
    }
  }

  out.sky_weight = T;
  out.rgb = out.rgb + model.sky(ray.direction) * T;
  out.depth += T * model.bounds.inf_sentinel();
  out.class_mass[model.sky_class] += T;
  return out;
}

struct OracleImages {
  ImageF rgb;
  ImageF depth;
  ImageU8 semantics;
};

inline OracleImages oracle_render_image(const SceneModel& model, const Camera& cam,
                                        const Pose& pose, int frame,
                                        bool include_instances = true) {
  OracleImages out;
  out.rgb = ImageF(cam.width, cam.height, 3);
  out.depth = ImageF(cam.width, cam.height, 1);
  out.semantics = ImageU8(cam.width, cam.height, 1);
  maybe_parallel_for(int64_t(cam.height), [&](int64_t ylo, int64_t yhi) {
    for (int64_t y = ylo; y < yhi; y++)
      for (int x = 0; x < cam.width; x++) {
        Ray r = generate_ray(cam, pose, double(x), double(y));
        OraclePixel px = oracle_render_ray(model, frame, r, include_instances);
        out.rgb.at(x, int(y), 0) = std::clamp(px.rgb.x, 0.0, 1.0);
        out.rgb.at(x, int(y), 1) = std::clamp(px.rgb.y, 0.0, 1.0);
        out.rgb.at(x, int(y), 2) = std::clamp(px.rgb.z, 0.0, 1.0);
        out.depth.at(x, int(y)) = px.depth;
        int best = 0;
        for (int k = 1; k < model.classes; k++)
          if (px.class_mass[k] > px.class_mass[best]) best = k;
        out.semantics.at(x, int(y)) = uint8_t(best);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// procedural scene construction
// ---------------------------------------------------------------------------

struct SyntheticSceneSpec {
  int width = 64;
  int height = 48;
  int frames = 8;
  uint64_t seed = 1;
  int static_boxes = 3;
  int moving_boxes = 1;
  double near = 0.5;
  double far = 30.0;
  double camera_step = 0.18;   // forward motion per frame (meters)
  double camera_sway = 0.03;   // lateral oscillation amplitude
  double focal = 60.0;

  static SyntheticSceneSpec from_config(const Config& c) {
    SyntheticSceneSpec s;
    s.width = int(c.get_int("width", s.width));
    s.height = int(c.get_int("height", s.height));
    s.frames = int(c.get_int("frames", s.frames));
    s.seed = uint64_t(c.get_int("seed", int64_t(s.seed)));
    s.static_boxes = int(c.get_int("static_boxes", s.static_boxes));
    s.moving_boxes = int(c.get_int("moving_boxes", s.moving_boxes));
    s.near = c.get_double("near", s.near);
    s.far = c.get_double("far", s.far);
    s.camera_step = c.get_double("camera_step", s.camera_step);
    s.camera_sway = c.get_double("camera_sway", s.camera_sway);
    s.focal = c.get_double("focal", s.focal);
    return s;
  }

  void validate() const {
    require(width >= 8 && height >= 8, "scene spec: image too small");
    require(frames >= 1, "scene spec: at least one frame");
    require(static_boxes >= 0 && moving_boxes >= 0, "scene spec: negative counts");
    require(near > 0 && near < far, "scene spec: 0 < near < far required");
  }
};

struct SyntheticScene {
  SceneModel model;
  Camera camera;
  std::vector<Pose> poses;  // per frame, camera-to-world
  // semantic classes: 0 sky, 1 ground, 2 structure, 3 vehicle
};

// World frame matches the first camera: +x right, +y down, +z forward.
inline SyntheticScene build_synthetic_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  SyntheticScene s;
  Rng rng(derive_seed(spec.seed, 0x5ce8e));

  s.camera.fx = spec.focal;
  s.camera.fy = spec.focal;
  s.camera.cx = spec.width / 2.0;
  s.camera.cy = spec.height / 2.0;
  s.camera.width = spec.width;
  s.camera.height = spec.height;

  for (int i = 0; i < spec.frames; i++) {
    Pose p = Pose::identity();
    p.translation = {spec.camera_sway * std::sin(0.6 * i), 0.0, spec.camera_step * i};
    double yaw = 0.015 * std::sin(0.45 * i + 0.8);
    p.rotation = axis_angle_to_matrix({0, yaw, 0});
    s.poses.push_back(p);
  }

  auto& m = s.model;
  m.bounds.near = spec.near;
  m.bounds.far = spec.far;
  m.bounds.center = {0, 0, 0.35 * spec.far};
  m.bounds.radius = 0.55 * spec.far;
  m.classes = 4;
  m.sky_class = 0;

  // smooth seeded ground texture; gentle gradients keep the scene learnable
  {
    double base_r = rng.uniform(0.30, 0.42), base_g = rng.uniform(0.30, 0.42),
           base_b = rng.uniform(0.28, 0.38);
    double fx1 = rng.uniform(0.10, 0.22), fz1 = rng.uniform(0.08, 0.18);
    double fx2 = rng.uniform(0.05, 0.12), fz2 = rng.uniform(0.12, 0.25);
    double ph1 = rng.uniform(0, 6.28), ph2 = rng.uniform(0, 6.28);
    m.ground_texture = [=](double x, double z) {
      double a = 0.08 * std::sin(fx1 * x + fz1 * z + ph1);
      double b = 0.06 * std::sin(fx2 * x - fz2 * z + ph2);
      return Vec3{std::clamp(base_r + a + 0.03 * b, 0.0, 1.0),
                  std::clamp(base_g + 0.5 * a + b, 0.0, 1.0),
                  std::clamp(base_b - a + 0.5 * b, 0.0, 1.0)};
    };
  }

  // sky gradient: horizon to zenith (up is -y)
  {
    Vec3 zenith{rng.uniform(0.15, 0.35), rng.uniform(0.35, 0.55), rng.uniform(0.75, 0.95)};
    Vec3 horizon{rng.uniform(0.65, 0.8), rng.uniform(0.7, 0.85), rng.uniform(0.8, 0.95)};
    m.sky = [=](const Vec3& d) {
      double up = std::clamp(-d.y, 0.0, 1.0);
      double u = std::pow(up, 0.6);
      return horizon * (1 - u) + zenith * u;
    };
  }

  // ground slab: top surface 1.4 m below the camera
  {
    ScenePrimitive ground;
    ground.box.pose.translation = {0, 1.4 + 6.0, 0.8 * spec.far};
    ground.box.half_extents = {4.0 * spec.far, 6.0, 2.2 * spec.far};
    ground.opaque = true;
    ground.textured = true;
    ground.category = 1;
    m.statics.push_back(ground);
  }

  // static side structures
  for (int i = 0; i < spec.static_boxes; i++) {
    ScenePrimitive b;
    double side = i % 2 == 0 ? -1.0 : 1.0;
    double hx = rng.uniform(0.8, 1.8), hy = rng.uniform(1.0, 2.2), hz = rng.uniform(0.9, 2.2);
    double z = rng.uniform(0.25, 0.85) * spec.far;
    b.box.pose.translation = {side * rng.uniform(3.2, 6.5), 1.4 - hy, z};
    b.box.pose.rotation = axis_angle_to_matrix({0, rng.uniform(-0.25, 0.25), 0});
    b.box.half_extents = {hx, hy, hz};
    b.opaque = true;
    b.albedo = {rng.uniform(0.35, 0.85), rng.uniform(0.35, 0.85), rng.uniform(0.35, 0.85)};
    b.category = 2;
    m.statics.push_back(b);
  }

  // moving vehicles crossing the corridor
  for (int k = 0; k < spec.moving_boxes; k++) {
    int id = 100 + k;
    ScenePrimitive tmpl;
    tmpl.opaque = true;
    tmpl.albedo = {rng.uniform(0.45, 0.95), rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)};
    tmpl.category = 3;
    tmpl.instance_id = id;
    Vec3 half{0.75, 0.55, 1.5};

    double x0 = rng.uniform(1.2, 2.2) * (k % 2 == 0 ? 1.0 : -1.0);
    double x1 = -x0 * rng.uniform(0.6, 1.0);
    double z0 = rng.uniform(0.32, 0.42) * spec.far;
    double z1 = z0 + rng.uniform(-0.12, 0.2) * spec.far;
    std::map<int, OrientedBox> traj;
    for (int f = 0; f < spec.frames; f++) {
      double a = spec.frames > 1 ? double(f) / (spec.frames - 1) : 0.0;
      OrientedBox box;
      box.pose.translation = {x0 + (x1 - x0) * a, 1.4 - half.y, z0 + (z1 - z0) * a};
      double heading = std::atan2(x1 - x0, z1 - z0);
      box.pose.rotation = axis_angle_to_matrix({0, heading, 0});
      box.half_extents = half;
      box.category = 3;
      box.instance_id = id;
      traj[f] = box;
    }
    m.trajectories[id] = traj;
    m.instance_prims[id] = tmpl;
  }

  // frustum residency: every moving box visible in at least half the frames
  for (const auto& [id, traj] : m.trajectories) {
    int visible = 0;
    for (int f = 0; f < spec.frames; f++) {
      const Vec3 c = traj.at(f).pose.translation;
      Vec3 local = s.poses[f].inverse().apply(c);
      if (local.z < spec.near) continue;
      double px = s.camera.fx * local.x / local.z + s.camera.cx;
      double py = s.camera.fy * local.y / local.z + s.camera.cy;
      if (px >= 0 && px < spec.width && py >= 0 && py < spec.height) visible++;
    }
    require(visible * 2 >= spec.frames,
            "scene spec: moving box " + std::to_string(id) +
                " visible in under half the frames (" + std::to_string(visible) + "/" +
                std::to_string(spec.frames) + ")");
  }
  return s;
}

// ---------------------------------------------------------------------------
// ground-truth pinning: the scene's exact fields behind the graph interface
// ---------------------------------------------------------------------------

struct PinnedGraphOptions {
  int bg_samples = 384;
  int fg_samples = 48;
  double opaque_sigma = 1e5;
};

inline std::unique_ptr<SceneGraph> build_pinned_graph(const SyntheticScene& scene,
                                                      const PinnedGraphOptions& opts = {}) {
  auto g = std::make_unique<SceneGraph>();
  const SceneModel& m = scene.model;
  g->bounds = m.bounds;
  g->semantic_classes = 0;  // rgb/depth cross-checks only
  g->sky_class = m.sky_class;

  const Vec3 center = m.bounds.center;
  const double radius = m.bounds.radius;
  auto field = std::make_unique<FunctionField>();
  const SceneModel* model = &m;
  const double opaque = opts.opaque_sigma;
  field->sigma_fn = [model, center, radius, opaque](const Vec3& y) {
    Vec3 world = uncontract(y) * radius + center;
    return model->static_sigma_at(world, opaque);
  };
  field->color_fn = [model, center, radius](const Vec3& y, const Vec3&) {
    Vec3 world = uncontract(y) * radius + center;
    return model->static_albedo_at(world);
  };
  g->background = std::move(field);
  g->sky = std::make_unique<FunctionSkyModel>(m.sky);

  g->sampler.background = "uniform";
  g->sampler.bg_uniform = opts.bg_samples;
  g->sampler.foreground = "uniform";
  g->sampler.fg_coarse = opts.fg_samples;
  g->sampler.fg_fine = opts.fg_samples;

  // per-instance appearance must survive pinning, so each instance gets its
  // own pseudo-category with an exact function-backed model
  for (const auto& [id, traj] : m.trajectories) {
    const ScenePrimitive& tmpl = m.instance_prims.at(id);
    const int pseudo_cat = 1000 + id;
    g->library.add_category(g->params, pseudo_cat, 2, 2, 2,
                            derive_seed(1, uint64_t(pseudo_cat)));
    auto fm = std::make_unique<FunctionForegroundModel>();
    Vec3 albedo = tmpl.albedo;
    fm->sigma_fn = [opaque](const Vec3&) { return opaque; };
    fm->color_fn = [albedo](const Vec3&, const Vec3&) { return albedo; };
    g->foreground[pseudo_cat] = std::move(fm);
    g->library.add_instance(id, pseudo_cat);
    for (const auto& [frame, box] : traj) {
      Tracklet t;
      t.instance_id = id;
      t.box = box;
      t.box.category = pseudo_cat;
      g->tracklets[frame].push_back(t);
    }
  }
  // frames with no instances still need entries
  for (size_t f = 0; f < scene.poses.size(); f++)
    if (!g->tracklets.count(int(f))) g->tracklets[int(f)] = {};
  return g;
}

}  // namespace nfsim
