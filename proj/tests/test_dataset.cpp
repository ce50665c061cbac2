// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
#include "nfsim/dataset.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nfsim/checkpoint.hpp"
#include "nfsim/trainer.hpp"

using namespace nfsim;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("nfsim_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

bool dirs_identical(const std::string& a, const std::string& b) {
  std::vector<std::string> rel_a;
  for (auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel_a.push_back(fs::relative(e.path(), a).string());
  std::sort(rel_a.begin(), rel_a.end());
  std::vector<std::string> rel_b;
  for (auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rel_b.push_back(fs::relative(e.path(), b).string());
  std::sort(rel_b.begin(), rel_b.end());
  if (rel_a != rel_b) return false;
  for (auto& r : rel_a)
    if (file_bytes((fs::path(a) / r).string()) != file_bytes((fs::path(b) / r).string()))
      return false;
  return true;
}

}  // namespace

TEST(Oracle, SkyOnlyScene) {
  SceneModel m;
  m.sky = [](const Vec3&) { return Vec3{0.3, 0.5, 0.7}; };
  m.bounds.far = 20.0;
  m.classes = 2;
  m.sky_class = 0;
  Ray r{{0, 0, 0}, {0, 0, 1}};
  auto px = oracle_render_ray(m, 0, r);
  EXPECT_DOUBLE_EQ(px.rgb.x, 0.3);
  EXPECT_DOUBLE_EQ(px.rgb.y, 0.5);
  EXPECT_DOUBLE_EQ(px.rgb.z, 0.7);
  EXPECT_DOUBLE_EQ(px.depth, m.bounds.inf_sentinel());
  EXPECT_DOUBLE_EQ(px.sky_weight, 1.0);
}

TEST(Oracle, OpaqueBoxGivesAlbedoAndEntryDepth) {
  SceneModel m;
  m.sky = [](const Vec3&) { return Vec3{1, 1, 1}; };
  ScenePrimitive p;
  p.box.pose.translation = {0, 0, 6};
  p.box.half_extents = {2, 2, 1};
  p.opaque = true;
  p.albedo = {0.2, 0.6, 0.4};
  p.category = 1;
  m.statics.push_back(p);
  Ray r{{0, 0, 0}, {0, 0, 1}};
  auto px = oracle_render_ray(m, 0, r);
  EXPECT_DOUBLE_EQ(px.rgb.x, 0.2);
  EXPECT_DOUBLE_EQ(px.rgb.y, 0.6);
  EXPECT_DOUBLE_EQ(px.rgb.z, 0.4);
  EXPECT_DOUBLE_EQ(px.depth, 5.0);
  EXPECT_DOUBLE_EQ(px.sky_weight, 0.0);
}

TEST(Oracle, TranslucentTransmittanceMatchesClosedForm) {
  SceneModel m;
  m.sky = [](const Vec3&) { return Vec3{0, 0, 0}; };
  ScenePrimitive p;
  p.box.pose.translation = {0, 0, 6};
  p.box.half_extents = {2, 2, 1.5};  // chord length 3
  p.opaque = false;
  p.sigma = 0.7;
  p.albedo = {1, 0, 0};
  m.statics.push_back(p);
  Ray r{{0, 0, 0}, {0, 0, 1}};
  auto px = oracle_render_ray(m, 0, r);
  const double trans = std::exp(-0.7 * 3.0);
  EXPECT_NEAR(px.sky_weight, trans, 1e-12);
  EXPECT_NEAR(px.rgb.x, 1.0 - trans, 1e-12);
}

TEST(Oracle, OverlappingTranslucentsMixByDensity) {
  SceneModel m;
  m.sky = [](const Vec3&) { return Vec3{0, 0, 0}; };
  for (int i = 0; i < 2; i++) {
    ScenePrimitive p;
    p.box.pose.translation = {0, 0, 5};
    p.box.half_extents = {1, 1, 1};
    p.opaque = false;
    p.sigma = i == 0 ? 0.4 : 0.8;
    p.albedo = i == 0 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    m.statics.push_back(p);
  }
  Ray r{{0, 0, 0}, {0, 0, 1}};
  auto px = oracle_render_ray(m, 0, r);
  const double total = 1.2, len = 2.0;
  const double absorb = 1.0 - std::exp(-total * len);
  EXPECT_NEAR(px.rgb.x, absorb * (0.4 / 1.2), 1e-12);
  EXPECT_NEAR(px.rgb.y, absorb * (0.8 / 1.2), 1e-12);
}

TEST(Generator, SeedDeterminismAndDistinctSeedsDiffer) {
  SyntheticSceneSpec spec;
  spec.width = 24;
  spec.height = 18;
  spec.frames = 3;
  spec.seed = 11;
  std::string d1 = temp_dir("gen1"), d2 = temp_dir("gen2"), d3 = temp_dir("gen3");
  save_dataset(d1, generate_synthetic(spec).dataset);
  save_dataset(d2, generate_synthetic(spec).dataset);
  EXPECT_TRUE(dirs_identical(d1, d2));
  spec.seed = 12;
  save_dataset(d3, generate_synthetic(spec).dataset);
  EXPECT_FALSE(dirs_identical(d1, d3));
  fs::remove_all(d1);
  fs::remove_all(d2);
  fs::remove_all(d3);
}

TEST(Generator, MovingBoxMustStayInFrustum) {
  SyntheticSceneSpec spec;
  spec.width = 24;
  spec.height = 18;
  spec.frames = 4;
  spec.camera_step = 20.0;  // drives past the vehicle immediately
  EXPECT_THROW(build_synthetic_scene(spec), std::invalid_argument);
}

TEST(DatasetIO, SaveLoadRoundTripIsByteIdentical) {
  SyntheticSceneSpec spec;
  spec.width = 24;
  spec.height = 18;
  spec.frames = 2;
  spec.seed = 5;
  std::string d1 = temp_dir("rt1"), d2 = temp_dir("rt2");
  save_dataset(d1, generate_synthetic(spec).dataset);
  Dataset loaded = load_dataset(d1);
  EXPECT_EQ(int(loaded.frames.size()), 2);
  EXPECT_TRUE(loaded.has_depth);
  EXPECT_TRUE(loaded.has_semantics);
  EXPECT_EQ(loaded.classes(), 4);
  save_dataset(d2, loaded);
  EXPECT_TRUE(dirs_identical(d1, d2));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(DatasetIO, UnknownCategoryErrorNamesInstance) {
  SyntheticSceneSpec spec;
  spec.width = 24;
  spec.height = 18;
  spec.frames = 2;
  std::string dir = temp_dir("badcat");
  save_dataset(dir, generate_synthetic(spec).dataset);
  {
    std::ofstream f(fs::path(dir) / "tracklets.txt", std::ios::app);
    f << "0 777 9 0 0 5 0 0 0 1 1 1\n";  // category 9 not in the table
  }
  try {
    load_dataset(dir);
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("777"), std::string::npos);
    EXPECT_NE(msg.find("tracklets.txt"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(DatasetIO, MalformedPoseRowReportsFileAndLine) {
  SyntheticSceneSpec spec;
  spec.width = 24;
  spec.height = 18;
  spec.frames = 2;
  std::string dir = temp_dir("badpose");
  save_dataset(dir, generate_synthetic(spec).dataset);
  {
    std::ofstream f(fs::path(dir) / "poses.txt", std::ios::app);
    f << "7 1 0 0\n";  // 3 floats instead of 12
  }
  try {
    load_dataset(dir);
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("poses.txt:3"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(SplitProtocol, MatchesHoldoutRules) {
  auto s75 = split_frames(8, 75);
  EXPECT_EQ(s75.train, (std::vector<int>{0, 1, 2, 4, 5, 6}));
  EXPECT_EQ(s75.holdout, (std::vector<int>{3, 7}));

  auto s50 = split_frames(8, 50);
  EXPECT_EQ(s50.train, (std::vector<int>{0, 2, 4, 6}));
  EXPECT_EQ(s50.holdout, (std::vector<int>{1, 3, 5, 7}));

  auto s25 = split_frames(8, 25);
  EXPECT_EQ(s25.train, (std::vector<int>{0, 4}));

  for (int frac : {25, 50, 75}) {
    auto s = split_frames(13, frac);
    std::vector<int> all = s.train;
    all.insert(all.end(), s.holdout.begin(), s.holdout.end());
    std::sort(all.begin(), all.end());
    std::vector<int> want(13);
    for (int i = 0; i < 13; i++) want[i] = i;
    EXPECT_EQ(all, want);  // union is everything, disjoint
  }
  EXPECT_THROW(split_frames(8, 60), std::invalid_argument);
}

TEST(Checkpoint, RoundTripRendersIdentically) {
  SyntheticSceneSpec spec;
  spec.width = 16;
  spec.height = 12;
  spec.frames = 2;
  auto gen = generate_synthetic(spec);
  Config cfg = resolve_config(gen.dataset.scene_config, {});
  cfg.set("background.grid.levels", "4");
  cfg.set("background.grid.r_max", "128");
  cfg.set("background.grid.table_log2", "10");
  auto g = build_scene_graph(cfg, gen.dataset);
  RAdam opt = make_optimizer(*g, cfg, 100);

  auto before = render_image(*g, gen.dataset.camera, gen.dataset.frames[0].pose, 0);

  std::string dir = temp_dir("ckpt");
  std::string path = (fs::path(dir) / "c.nfck").string();
  auto tensors = snapshot_params(g->params);
  append_optimizer_state(tensors, opt);
  write_tensor_file(path, tensors);

  // perturb, then restore
  for (const auto& p : g->params.all())
    for (auto& v : p->value) v += 0.37;
  auto loaded = read_tensor_file(path);
  restore_params(loaded, g->params);
  restore_optimizer_state(loaded, opt);

  auto after = render_image(*g, gen.dataset.camera, gen.dataset.frames[0].pose, 0);
  ASSERT_EQ(before.rgb.data.size(), after.rgb.data.size());
  for (size_t i = 0; i < before.rgb.data.size(); i++)
    EXPECT_EQ(before.rgb.data[i], after.rgb.data[i]);
  fs::remove_all(dir);
}

TEST(Checkpoint, TruncationDetectedByChecksum) {
  std::string dir = temp_dir("trunc");
  std::string path = (fs::path(dir) / "c.nfck").string();
  ad::ParamStore store;
  auto* p = store.create("w", 64, 4);
  Rng rng(3);
  p->init_uniform(rng, -1, 1);
  write_tensor_file(path, snapshot_params(store));

  std::string bytes = file_bytes(path);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), std::streamsize(bytes.size() - 16));
  }
  EXPECT_THROW(read_tensor_file(path), std::runtime_error);

  // flipped payload byte fails the per-tensor checksum
  {
    std::string corrupted = bytes;
    corrupted[corrupted.size() - 5] ^= 0x40;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(corrupted.data(), std::streamsize(corrupted.size()));
  }
  try {
    read_tensor_file(path);
    FAIL() << "expected checksum error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, ConfigMismatchRejectedNamingTensor) {
  ad::ParamStore a;
  a.create("bg/table0", 16, 2);
  std::string dir = temp_dir("mismatch");
  std::string path = (fs::path(dir) / "c.nfck").string();
  write_tensor_file(path, snapshot_params(a));

  ad::ParamStore b;
  b.create("bg/table0", 32, 2);  // different table size
  auto tensors = read_tensor_file(path);
  try {
    restore_params(tensors, b);
    FAIL() << "expected shape mismatch";
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("bg/table0"), std::string::npos);
    EXPECT_NE(msg.find("16"), std::string::npos);
    EXPECT_NE(msg.find("32"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, VersionMismatchRejected) {
  std::string dir = temp_dir("ver");
  std::string path = (fs::path(dir) / "c.nfck").string();
  ad::ParamStore store;
  store.create("w", 2, 2);
  write_tensor_file(path, snapshot_params(store));
  std::string bytes = file_bytes(path);
  bytes[4] = 9;  // version field
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), std::streamsize(bytes.size()));
  }
  try {
    read_tensor_file(path);
    FAIL() << "expected version error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  fs::remove_all(dir);
}
