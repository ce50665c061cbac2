// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// KITTI-style directory datasets: images/NNNN.ppm, optional depth/NNNN.pgm
// (16-bit, millimeters) and semantics/NNNN.pgm, plus poses.txt,
// tracklets.txt, categories.txt, intrinsics.txt and scene.cfg. Loaders
// validate aggressively and report file/line on malformed rows.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nfsim/config.hpp"
#include "nfsim/geometry.hpp"
#include "nfsim/image.hpp"
#include "nfsim/scene_graph.hpp"
#include "nfsim/synthetic.hpp"

namespace nfsim {

struct Frame {
  int id = 0;
  ImageF image;       // rgb in [0,1]
  Pose pose;          // camera-to-world
  std::vector<Tracklet> tracklets;
  ImageF depth;       // meters; empty when absent
  ImageU8 semantics;  // class ids; empty when absent

  bool has_depth() const { return depth.width > 0; }
  bool has_semantics() const { return semantics.width > 0; }
};

struct Dataset {
  Camera camera;
  std::vector<Frame> frames;
  std::map<int, std::string> categories;
  Config scene_config;

  bool has_depth = false;
  bool has_semantics = false;

  SceneBounds bounds() const {
    SceneBounds b;
    b.near = scene_config.get_double("scene.near", b.near);
    b.far = scene_config.get_double("scene.far", b.far);
    auto c = scene_config.get_vec("scene.center", {0, 0, 0});
    require(c.size() == 3, "scene.cfg: scene.center must have 3 components");
    b.center = {c[0], c[1], c[2]};
    b.radius = scene_config.get_double("scene.radius", b.radius);
    return b;
  }

  int classes() const {
    int max_id = -1;
    for (auto& [id, name] : categories) max_id = std::max(max_id, id);
    return int(scene_config.get_int("semantics.classes", max_id + 1));
  }

  int sky_class() const { return int(scene_config.get_int("semantics.sky_class", 0)); }
};

namespace detail {

inline std::string frame_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", id);
  return buf;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

[[noreturn]] inline void row_error(const std::string& file, int line, const std::string& why) {
  throw std::runtime_error(file + ":" + std::to_string(line) + ": " + why);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// save / load
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  if (ds.has_depth) fs::create_directories(fs::path(dir) / "depth");
  if (ds.has_semantics) fs::create_directories(fs::path(dir) / "semantics");

  {
    std::ofstream f(fs::path(dir) / "intrinsics.txt");
    f << detail::fmt(ds.camera.fx) << " " << detail::fmt(ds.camera.fy) << " "
      << detail::fmt(ds.camera.cx) << " " << detail::fmt(ds.camera.cy) << " " << ds.camera.width
      << " " << ds.camera.height << "\n";
  }
  {
    std::ofstream f(fs::path(dir) / "poses.txt");
    for (const auto& fr : ds.frames) {
      f << fr.id;
      for (int r = 0; r < 3; r++) {
        for (int c = 0; c < 3; c++) f << " " << detail::fmt(fr.pose.rotation.at(r, c));
        f << " " << detail::fmt(r == 0 ? fr.pose.translation.x
                                       : r == 1 ? fr.pose.translation.y : fr.pose.translation.z);
      }
      f << "\n";
    }
  }
  {
    std::ofstream f(fs::path(dir) / "tracklets.txt");
    for (const auto& fr : ds.frames)
      for (const auto& t : fr.tracklets) {
        Vec3 aa = matrix_to_axis_angle(t.box.pose.rotation);
        f << fr.id << " " << t.instance_id << " " << t.box.category << " "
          << detail::fmt(t.box.pose.translation.x) << " " << detail::fmt(t.box.pose.translation.y)
          << " " << detail::fmt(t.box.pose.translation.z) << " " << detail::fmt(aa.x) << " "
          << detail::fmt(aa.y) << " " << detail::fmt(aa.z) << " "
          << detail::fmt(t.box.half_extents.x) << " " << detail::fmt(t.box.half_extents.y) << " "
          << detail::fmt(t.box.half_extents.z) << "\n";
      }
  }
  {
    std::ofstream f(fs::path(dir) / "categories.txt");
    for (const auto& [id, name] : ds.categories) f << id << " " << name << "\n";
  }
  ds.scene_config.save((fs::path(dir) / "scene.cfg").string());

  for (const auto& fr : ds.frames) {
    pnm::write_ppm((fs::path(dir) / "images" / (detail::frame_name(fr.id) + ".ppm")).string(),
                   fr.image);
    if (fr.has_depth())
      pnm::write_depth_pgm(
          (fs::path(dir) / "depth" / (detail::frame_name(fr.id) + ".pgm")).string(), fr.depth);
    if (fr.has_semantics())
      pnm::write_pgm8(
          (fs::path(dir) / "semantics" / (detail::frame_name(fr.id) + ".pgm")).string(),
          fr.semantics);
  }
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  ensure(fs::exists(dir), "load_dataset: directory '" + dir + "' does not exist");
  Dataset ds;

  {
    std::string path = (fs::path(dir) / "intrinsics.txt").string();
    std::ifstream f(path);
    ensure(f.good(), "load_dataset: missing " + path);
    std::string line;
    std::getline(f, line);
    std::istringstream ss(line);
    if (!(ss >> ds.camera.fx >> ds.camera.fy >> ds.camera.cx >> ds.camera.cy >>
          ds.camera.width >> ds.camera.height))
      detail::row_error(path, 1, "expected 'fx fy cx cy width height'");
    ds.camera.validate();
  }
  {
    std::string path = (fs::path(dir) / "categories.txt").string();
    std::ifstream f(path);
    ensure(f.good(), "load_dataset: missing " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      lineno++;
      if (line.empty()) continue;
      std::istringstream ss(line);
      int id;
      std::string name;
      if (!(ss >> id >> name)) detail::row_error(path, lineno, "expected 'id name'");
      ds.categories[id] = name;
    }
  }
  {
    std::string path = (fs::path(dir) / "poses.txt").string();
    std::ifstream f(path);
    ensure(f.good(), "load_dataset: missing " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      lineno++;
      if (line.empty()) continue;
      std::istringstream ss(line);
      Frame fr;
      double vals[12];
      if (!(ss >> fr.id)) detail::row_error(path, lineno, "expected frame id");
      for (int i = 0; i < 12; i++)
        if (!(ss >> vals[i]))
          detail::row_error(path, lineno, "expected 12 pose floats, got " + std::to_string(i));
      for (int r = 0; r < 3; r++) {
        for (int c = 0; c < 3; c++) fr.pose.rotation.at(r, c) = vals[r * 4 + c];
      }
      fr.pose.translation = {vals[3], vals[7], vals[11]};
      if (!fr.pose.is_valid(1e-6))
        detail::row_error(path, lineno,
                          "rotation of frame " + std::to_string(fr.id) + " is not orthonormal");
      for (const auto& existing : ds.frames)
        if (existing.id == fr.id)
          detail::row_error(path, lineno, "duplicate frame id " + std::to_string(fr.id));
      ds.frames.push_back(std::move(fr));
    }
    ensure(!ds.frames.empty(), "load_dataset: poses.txt lists no frames");
  }
  {
    std::string path = (fs::path(dir) / "tracklets.txt").string();
    std::ifstream f(path);
    ensure(f.good(), "load_dataset: missing " + path);
    std::string line;
    int lineno = 0;
    std::map<int, int> instance_category;
    while (std::getline(f, line)) {
      lineno++;
      if (line.empty()) continue;
      std::istringstream ss(line);
      int frame_id, instance_id, category;
      double cx, cy, cz, ax, ay, az, hx, hy, hz;
      if (!(ss >> frame_id >> instance_id >> category >> cx >> cy >> cz >> ax >> ay >> az >> hx >>
            hy >> hz))
        detail::row_error(path, lineno,
                          "expected 'frame instance category center(3) axis-angle(3) half(3)'");
      if (!ds.categories.count(category))
        detail::row_error(path, lineno,
                          "tracklet for instance " + std::to_string(instance_id) +
                              " references unknown category " + std::to_string(category));
      auto known = instance_category.find(instance_id);
      if (known != instance_category.end() && known->second != category)
        detail::row_error(path, lineno,
                          "instance " + std::to_string(instance_id) +
                              " changes category across frames");
      instance_category[instance_id] = category;

      Frame* frame = nullptr;
      for (auto& fr : ds.frames)
        if (fr.id == frame_id) frame = &fr;
      if (!frame)
        detail::row_error(path, lineno, "tracklet references unknown frame " +
                                            std::to_string(frame_id));
      Tracklet t;
      t.instance_id = instance_id;
      t.box.instance_id = instance_id;
      t.box.category = category;
      t.box.pose.rotation = axis_angle_to_matrix({ax, ay, az});
      t.box.pose.translation = {cx, cy, cz};
      t.box.half_extents = {hx, hy, hz};
      t.box.validate();
      frame->tracklets.push_back(t);
    }
  }
  {
    std::string cfg_path = (fs::path(dir) / "scene.cfg").string();
    if (fs::exists(cfg_path)) ds.scene_config = Config::from_file(cfg_path);
  }

  for (auto& fr : ds.frames) {
    std::string img =
        (fs::path(dir) / "images" / (detail::frame_name(fr.id) + ".ppm")).string();
    ensure(fs::exists(img), "load_dataset: missing image " + img);
    fr.image = pnm::read_ppm(img);
    ensure(fr.image.width == ds.camera.width && fr.image.height == ds.camera.height,
           "load_dataset: " + img + " does not match camera dimensions");

    std::string dep = (fs::path(dir) / "depth" / (detail::frame_name(fr.id) + ".pgm")).string();
    if (fs::exists(dep)) {
      fr.depth = pnm::read_depth_pgm(dep);
      ensure(fr.depth.width == ds.camera.width && fr.depth.height == ds.camera.height,
             "load_dataset: " + dep + " does not match camera dimensions");
      ds.has_depth = true;
    }
    std::string sem =
        (fs::path(dir) / "semantics" / (detail::frame_name(fr.id) + ".pgm")).string();
    if (fs::exists(sem)) {
      fr.semantics = pnm::read_pgm8(sem);
      ensure(fr.semantics.width == ds.camera.width && fr.semantics.height == ds.camera.height,
             "load_dataset: " + sem + " does not match camera dimensions");
      ds.has_semantics = true;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// train/holdout split protocol
// ---------------------------------------------------------------------------

struct Split {
  std::vector<int> train;    // indices into Dataset::frames
  std::vector<int> holdout;
};

// 75%: hold out every 4th frame. 50%: hold out the 2nd and 4th of each group
// of four. 25%: train on one frame in four.
inline Split split_frames(int n_frames, int fraction) {
  require(fraction == 25 || fraction == 50 || fraction == 75,
          "split: fraction must be one of {25, 50, 75}");
  Split s;
  for (int i = 0; i < n_frames; i++) {
    int pos = i % 4;
    bool train;
    if (fraction == 75)
      train = pos != 3;
    else if (fraction == 50)
      train = pos == 0 || pos == 2;
    else
      train = pos == 0;
    (train ? s.train : s.holdout).push_back(i);
  }
  return s;
}

// ---------------------------------------------------------------------------
// synthetic dataset generation through the analytic oracle
// ---------------------------------------------------------------------------

struct GeneratedScene {
  SyntheticScene scene;
  Dataset dataset;
};

inline GeneratedScene generate_synthetic(const SyntheticSceneSpec& spec) {
  GeneratedScene out;
  out.scene = build_synthetic_scene(spec);
  const SyntheticScene& s = out.scene;

  Dataset& ds = out.dataset;
  ds.camera = s.camera;
  ds.categories = {{0, "sky"}, {1, "ground"}, {2, "structure"}, {3, "vehicle"}};
  ds.has_depth = true;
  ds.has_semantics = true;

  for (int f = 0; f < spec.frames; f++) {
    Frame fr;
    fr.id = f;
    fr.pose = s.poses[f];
    OracleImages imgs = oracle_render_image(s.model, s.camera, s.poses[f], f, true);
    fr.image = std::move(imgs.rgb);
    fr.depth = std::move(imgs.depth);
    fr.semantics = std::move(imgs.semantics);
    for (const auto& [id, traj] : s.model.trajectories) {
      auto it = traj.find(f);
      if (it == traj.end()) continue;
      Tracklet t;
      t.instance_id = id;
      t.box = it->second;
      fr.tracklets.push_back(t);
    }
    ds.frames.push_back(std::move(fr));
  }

  Config& cfg = ds.scene_config;
  cfg.set("seed", std::to_string(spec.seed));
  cfg.set("scene.near", detail::fmt(s.model.bounds.near));
  cfg.set("scene.far", detail::fmt(s.model.bounds.far));
  cfg.set("scene.center", detail::fmt(s.model.bounds.center.x) + "," +
                              detail::fmt(s.model.bounds.center.y) + "," +
                              detail::fmt(s.model.bounds.center.z));
  cfg.set("scene.radius", detail::fmt(s.model.bounds.radius));
  cfg.set("semantics.classes", "4");
  cfg.set("semantics.sky_class", "0");
  return out;
}

}  // namespace nfsim
