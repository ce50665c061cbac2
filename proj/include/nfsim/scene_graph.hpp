// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Background node + per-frame instance tracklets + object library, and the
// instance-level edit operations (remove / transform / add).
#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nfsim/config.hpp"
#include "nfsim/fields.hpp"
#include "nfsim/geometry.hpp"
#include "nfsim/tensor.hpp"

namespace nfsim {

struct SceneBounds {
  double near = 0.5;
  double far = 30.0;
  Vec3 center{0, 0, 0};
  double radius = 10.0;  // region of interest maps into the unit ball

  double inf_sentinel() const { return 1.25 * far; }
};

struct Tracklet {
  int instance_id = -1;
  OrientedBox box;
};

// Eq.-3 style one-hot: the sample's density lands at its category index.
inline std::vector<double> onehot_semantics(double sigma, int category, int classes) {
  require(sigma >= 0, "onehot_semantics: density must be non-negative");
  require(category >= 0 && category < classes,
          "onehot_semantics: category " + std::to_string(category) + " out of range [0, " +
              std::to_string(classes) + ")");
  std::vector<double> s(classes, 0.0);
  s[category] = sigma;
  return s;
}

struct SamplerConfig {
  std::string background = "proposal";  // uniform | c2f | proposal
  std::string foreground = "c2f";       // uniform | c2f
  int bg_uniform = 128;
  int bg_coarse = 64;
  int bg_fine = 64;
  int proposal_iterations = 2;
  int proposal_per_iteration = 64;
  int bg_final = 32;
  int fg_coarse = 32;
  int fg_fine = 32;

  void validate() const {
    require(background == "uniform" || background == "c2f" || background == "proposal",
            "sampler.background must be uniform | c2f | proposal");
    require(foreground == "uniform" || foreground == "c2f",
            "sampler.foreground must be uniform | c2f");
  }
};

class SceneGraph {
 public:
  ad::ParamStore params;
  std::unique_ptr<Field> background;
  std::unique_ptr<ProposalGridField> proposal;  // present when the sampler needs it
  std::unique_ptr<SkyModel> sky;
  std::map<int, std::unique_ptr<ForegroundModel>> foreground;  // keyed by category
  ObjectLibrary library;
  std::map<int, std::vector<Tracklet>> tracklets;  // frame -> visible instances
  SceneBounds bounds;
  SamplerConfig sampler;
  int semantic_classes = 0;  // 0 disables the semantic channel
  int sky_class = 0;
  uint64_t seed = 0;

  const std::vector<Tracklet>& visible_objects(int frame) const {
    auto it = tracklets.find(frame);
    require(it != tracklets.end(), "scene graph: unknown frame " + std::to_string(frame));
    return it->second;
  }

  bool has_frame(int frame) const { return tracklets.count(frame) > 0; }

  std::vector<int> frames() const {
    std::vector<int> f;
    for (auto& [k, v] : tracklets) f.push_back(k);
    return f;
  }

  // Drops every tracklet entry for the id; the library entry stays.
  void remove_instance(int instance_id) {
    require(library.has_instance(instance_id),
            "remove_instance: unknown id " + std::to_string(instance_id));
    bool found = false;
    for (auto& [frame, list] : tracklets) {
      auto it = std::remove_if(list.begin(), list.end(),
                               [&](const Tracklet& t) { return t.instance_id == instance_id; });
      found = found || it != list.end();
      list.erase(it, list.end());
    }
    require(found, "remove_instance: id " + std::to_string(instance_id) +
                       " has no tracklet entries");
  }

  // Composes delta with each affected box pose (delta acts in world space).
  void transform_instance(int instance_id, int frame_begin, int frame_end, const Pose& delta) {
    require(frame_begin <= frame_end, "transform_instance: empty frame range");
    bool found = false;
    for (auto& [frame, list] : tracklets) {
      if (frame < frame_begin || frame > frame_end) continue;
      for (auto& t : list)
        if (t.instance_id == instance_id) {
          t.box.pose = delta.compose(t.box.pose);
          found = true;
        }
    }
    require(found, "transform_instance: id " + std::to_string(instance_id) +
                       " not present in frames [" + std::to_string(frame_begin) + ", " +
                       std::to_string(frame_end) + "]");
  }

  // New instance of an existing category. latent_source >= 0 shares that
  // instance's codes; -1 allocates a fresh randomly initialized row.
  int add_instance(int category, int latent_source,
                   const std::map<int, OrientedBox>& trajectory) {
    require(foreground.count(category),
            "add_instance: no decoder for category " + std::to_string(category));
    require(!trajectory.empty(), "add_instance: empty trajectory");
    for (auto& [frame, box] : trajectory)
      require(tracklets.count(frame),
              "add_instance: frame " + std::to_string(frame) + " not in the scene");
    int id = library.max_instance_id() + 1;
    if (latent_source >= 0) {
      library.add_instance_alias(id, latent_source);
    } else {
      library.add_instance_fresh(id, category, derive_seed(seed, 0xadd1, uint64_t(id)));
    }
    for (auto& [frame, box] : trajectory) {
      Tracklet t;
      t.instance_id = id;
      t.box = box;
      t.box.instance_id = id;
      t.box.category = category;
      tracklets[frame].push_back(t);
    }
    return id;
  }
};

// ---------------------------------------------------------------------------
// edit scripts: ordered remove / transform / add commands applied before
// rendering
// ---------------------------------------------------------------------------

struct EditCommand {
  enum Kind { kRemove, kTransform, kAdd, kAt } kind;
  int instance_id = -1;   // remove / transform
  int frame_begin = 0, frame_end = 0;
  Pose delta;
  std::string handle;     // add / at
  int category = -1;
  int latent_source = -1;  // -1 = fresh latents
  int frame = -1;
  OrientedBox box;
};

inline std::vector<EditCommand> parse_edit_script(const std::string& path) {
  std::ifstream f(path);
  ensure(f.good(), "edit script: cannot open '" + path + "'");
  std::vector<EditCommand> cmds;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    lineno++;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string op;
    if (!(ss >> op)) continue;
    auto bad = [&](const std::string& why) {
      throw std::runtime_error("edit script: " + path + ":" + std::to_string(lineno) + ": " + why);
    };
    EditCommand c;
    if (op == "remove") {
      c.kind = EditCommand::kRemove;
      if (!(ss >> c.instance_id)) bad("remove <instance-id>");
    } else if (op == "transform") {
      c.kind = EditCommand::kTransform;
      double tx, ty, tz, ax, ay, az;
      if (!(ss >> c.instance_id >> c.frame_begin >> c.frame_end >> tx >> ty >> tz >> ax >> ay >>
            az))
        bad("transform <id> <f0> <f1> <tx ty tz> <ax ay az>");
      c.delta.rotation = axis_angle_to_matrix({ax, ay, az});
      c.delta.translation = {tx, ty, tz};
    } else if (op == "add") {
      c.kind = EditCommand::kAdd;
      std::string latents;
      if (!(ss >> c.handle >> c.category >> latents)) bad("add <handle> <category> <id|new>");
      c.latent_source = latents == "new" ? -1 : std::stoi(latents);
    } else if (op == "at") {
      c.kind = EditCommand::kAt;
      double cx, cy, cz, ax, ay, az, hx, hy, hz;
      if (!(ss >> c.handle >> c.frame >> cx >> cy >> cz >> ax >> ay >> az >> hx >> hy >> hz))
        bad("at <handle> <frame> <cx cy cz> <ax ay az> <hx hy hz>");
      c.box.pose.rotation = axis_angle_to_matrix({ax, ay, az});
      c.box.pose.translation = {cx, cy, cz};
      c.box.half_extents = {hx, hy, hz};
    } else {
      bad("unknown command '" + op + "'");
    }
    cmds.push_back(c);
  }
  return cmds;
}

inline void apply_edits(SceneGraph& graph, const std::vector<EditCommand>& cmds) {
  // `at` rows accumulate trajectories for the preceding `add`
  std::map<std::string, std::pair<EditCommand, std::map<int, OrientedBox>>> pending;
  auto flush = [&]() {
    for (auto& [handle, entry] : pending) {
      require(!entry.second.empty(), "edit script: add '" + handle + "' has no `at` rows");
      graph.add_instance(entry.first.category, entry.first.latent_source, entry.second);
    }
    pending.clear();
  };
  for (const auto& c : cmds) {
    switch (c.kind) {
      case EditCommand::kRemove:
        flush();
        graph.remove_instance(c.instance_id);
        break;
      case EditCommand::kTransform:
        flush();
        graph.transform_instance(c.instance_id, c.frame_begin, c.frame_end, c.delta);
        break;
      case EditCommand::kAdd:
        require(!pending.count(c.handle), "edit script: duplicate add handle '" + c.handle + "'");
        pending[c.handle] = {c, {}};
        break;
      case EditCommand::kAt: {
        auto it = pending.find(c.handle);
        require(it != pending.end(), "edit script: `at` before `add` for '" + c.handle + "'");
        it->second.second[c.frame] = c.box;
        break;
      }
    }
  }
  flush();
}

}  // namespace nfsim
