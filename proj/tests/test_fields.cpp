// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
#include "nfsim/fields.hpp"

#include <gtest/gtest.h>

#include "nfsim/gradcheck.hpp"
#include "nfsim/optim.hpp"

using namespace nfsim;
using namespace nfsim::ad;

namespace {

Mat random_points(int n, uint64_t seed, double lo = -1, double hi = 1) {
  Mat m(n, 3);
  Rng rng(seed);
  for (auto& v : m.v) v = rng.uniform(lo, hi);
  return m;
}

Mat random_dirs(int n, uint64_t seed) {
  Mat m(n, 3);
  Rng rng(seed);
  for (int r = 0; r < n; r++) {
    Vec3 d = Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}.normalized();
    m.at(r, 0) = d.x;
    m.at(r, 1) = d.y;
    m.at(r, 2) = d.z;
  }
  return m;
}

}  // namespace

TEST(Posenc, ZeroInput) {
  auto out = posenc({0.0, 0.0, 0.0}, 4);
  ASSERT_EQ(int(out.size()), posenc_dim(3, 4));
  for (int c = 0; c < 3; c++)
    for (int f = 0; f < 4; f++) {
      EXPECT_DOUBLE_EQ(out[c * 8 + 2 * f], 0.0);      // sin
      EXPECT_DOUBLE_EQ(out[c * 8 + 2 * f + 1], 1.0);  // cos
    }
  // raw input appended
  EXPECT_DOUBLE_EQ(out[24], 0.0);
  EXPECT_DOUBLE_EQ(out[25], 0.0);
  EXPECT_DOUBLE_EQ(out[26], 0.0);
}

TEST(Posenc, OutputLength) {
  for (int dim = 1; dim <= 4; dim++)
    for (int freqs = 1; freqs <= 10; freqs++) {
      std::vector<double> v(dim, 0.3);
      EXPECT_EQ(int(posenc(v, freqs).size()), dim * (2 * freqs + 1));
    }
}

TEST(Posenc, DerivativeMatchesAnalyticForm) {
  const int freqs = 5;
  Rng rng(8);
  for (int trial = 0; trial < 50; trial++) {
    double v = rng.uniform(-2, 2);
    const double h = 1e-6;
    auto fp = posenc({v + h}, freqs);
    auto fm = posenc({v - h}, freqs);
    for (int f = 0; f < freqs; f++) {
      double w = std::pow(2.0, f) * M_PI;
      double dsin = (fp[2 * f] - fm[2 * f]) / (2 * h);
      double dcos = (fp[2 * f + 1] - fm[2 * f + 1]) / (2 * h);
      EXPECT_NEAR(dsin, w * std::cos(w * v), 1e-3 * std::max(1.0, w));
      EXPECT_NEAR(dcos, -w * std::sin(w * v), 1e-3 * std::max(1.0, w));
    }
  }
}

TEST(MlpFieldEval, DensityIndependentOfDirectionBitForBit) {
  ParamStore store;
  MlpFieldConfig cfg;
  cfg.layers = 4;  // small net, same contract
  MlpField field(store, "bg", cfg, 42);
  Mat x = random_points(16, 1);
  Mat d1 = random_dirs(16, 2);
  Mat d2 = random_dirs(16, 3);
  Tape t1, t2;
  auto o1 = field.eval(t1, x, d1);
  auto o2 = field.eval(t2, x, d2);
  auto s1 = o1.density.data();
  auto s2 = o2.density.data();
  for (int i = 0; i < 16; i++) EXPECT_EQ(s1[i], s2[i]);
}

TEST(MlpFieldEval, FiniteOutputsOnRandomInputs) {
  ParamStore store;
  MlpFieldConfig cfg;
  cfg.layers = 4;
  cfg.semantic_classes = 3;
  MlpField field(store, "bg", cfg, 42);
  Mat x = random_points(1000, 5, -2, 2);
  Mat d = random_dirs(1000, 6);
  Tape t;
  auto out = field.eval(t, x, d);
  for (double v : out.density.data()) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_GE(v, 0.0);
  }
  for (double v : out.color.data()) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  for (double v : out.semantics->data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(MlpFieldEval, ParameterGradientsMatchFiniteDifferences) {
  ParamStore store;
  MlpFieldConfig cfg;
  cfg.layers = 3;
  cfg.hidden = 16;
  cfg.pos_freqs = 3;
  cfg.dir_freqs = 2;
  MlpField field(store, "bg", cfg, 42);
  Mat x = random_points(8, 1);
  Mat d = random_dirs(8, 2);
  auto loss_fn = [&](Tape& t) {
    auto out = field.eval(t, x, d);
    return t.add(t.sum(t.mul(out.color, out.color)), t.sum(out.density));
  };
  std::vector<Param*> params;
  for (auto& p : store.all()) params.push_back(p.get());
  auto res = fd_check("mlp_field", loss_fn, params, 300, 17);
  EXPECT_TRUE(res.pass) << res.max_rel_err;
}

TEST(GridLevels, PowerOfTwoLadder) {
  auto rs = grid_levels(16, 128, 4);
  ASSERT_EQ(rs.size(), 4u);
  EXPECT_EQ(rs[0], 16);
  EXPECT_EQ(rs[1], 32);
  EXPECT_EQ(rs[2], 64);
  EXPECT_EQ(rs[3], 128);
}

TEST(GridLevels, DegenerateConfigRejected) {
  EXPECT_THROW(grid_levels(16, 16, 2), std::invalid_argument);
  EXPECT_THROW(grid_levels(16, 128, 1), std::invalid_argument);
}

TEST(GridLevels, EndpointsAlwaysExact) {
  Rng rng(7);
  for (int i = 0; i < 50; i++) {
    int rmin = 2 + rng.uniform_int(60);
    int rmax = rmin + 1 + rng.uniform_int(2000);
    int L = 2 + rng.uniform_int(14);
    auto rs = grid_levels(rmin, rmax, L);
    EXPECT_EQ(rs.front(), rmin);
    EXPECT_EQ(rs.back(), rmax);
    for (size_t l = 1; l < rs.size(); l++) EXPECT_GE(rs[l], rs[l - 1]);
  }
}

TEST(GridField, TrilinearWeightsNonNegativeSumToOne) {
  Mat x = random_points(200, 3, -2, 2);
  auto plan = make_gather_plan(x, 33, (1u << 12) - 1, -2.0, 2.0);
  for (int i = 0; i < plan->n; i++) {
    double s = 0;
    for (int c = 0; c < 8; c++) {
      EXPECT_GE(plan->w[i * 8 + c], 0.0);
      s += plan->w[i * 8 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(GridField, VertexQueryCollapsesToTableEntry) {
  ParamStore store;
  HashGridConfig cfg;
  cfg.levels = 2;
  cfg.r_min = 4;
  cfg.r_max = 8;
  cfg.table_log2 = 10;
  cfg.domain_lo = 0.0;
  cfg.domain_hi = 1.0;
  HashGridField field(store, "g", cfg, 9);
  // (0.25, 0.5, 0.75): lattice point at both resolutions
  Mat x(1, 3, {0.25, 0.5, 0.75});
  Tape t;
  auto enc = field.encode(t, x);
  auto data = enc.data();
  uint32_t mask = (1u << 10) - 1;
  uint32_t h0 = grid_hash(1, 2, 3, mask);   // res 4
  uint32_t h1 = grid_hash(2, 4, 6, mask);   // res 8
  EXPECT_DOUBLE_EQ(data[0], field.table(0)->value[h0 * 2]);
  EXPECT_DOUBLE_EQ(data[1], field.table(0)->value[h0 * 2 + 1]);
  EXPECT_DOUBLE_EQ(data[2], field.table(1)->value[h1 * 2]);
  EXPECT_DOUBLE_EQ(data[3], field.table(1)->value[h1 * 2 + 1]);
}

TEST(GridField, MidpointQueryIsMeanOfCornerPair) {
  ParamStore store;
  HashGridConfig cfg;
  cfg.levels = 2;
  cfg.r_min = 4;
  cfg.r_max = 8;
  cfg.table_log2 = 10;
  cfg.domain_lo = 0.0;
  cfg.domain_hi = 1.0;
  HashGridField field(store, "g", cfg, 9);
  // frac 0.5 along x only, at resolution 4: u = (1.5, 2, 3)
  Mat x(1, 3, {0.375, 0.5, 0.75});
  Tape t;
  auto enc = field.encode(t, x);
  uint32_t mask = (1u << 10) - 1;
  double want0 =
      0.5 * (field.table(0)->value[grid_hash(1, 2, 3, mask) * 2] +
             field.table(0)->value[grid_hash(2, 2, 3, mask) * 2]);
  EXPECT_NEAR(enc.data()[0], want0, 1e-15);
}

TEST(GridField, DeterministicLookupsAndFiniteDifferences) {
  ParamStore store;
  HashGridConfig cfg;
  cfg.levels = 3;
  cfg.r_min = 4;
  cfg.r_max = 16;
  cfg.table_log2 = 8;
  cfg.hidden = 16;
  cfg.geo_features = 7;
  cfg.dir_freqs = 2;
  cfg.semantic_classes = 3;
  HashGridField field(store, "g", cfg, 11);
  // move table entries off the fresh-init scale so relu pre-activations sit
  // away from the kink during finite differencing
  for (int l = 0; l < cfg.levels; l++) {
    Rng rng(derive_seed(99, l));
    field.table(l)->init_uniform(rng, -0.5, 0.5);
  }
  Mat x = random_points(12, 21, -1.9, 1.9);
  Mat d = random_dirs(12, 22);

  Tape t1, t2;
  auto a = field.eval(t1, x, d);
  auto b = field.eval(t2, x, d);
  for (int i = 0; i < 12; i++) EXPECT_EQ(a.density.data()[i], b.density.data()[i]);

  auto loss_fn = [&](Tape& t) {
    auto out = field.eval(t, x, d);
    return t.add(t.add(t.sum(out.color), t.sum(out.density)), t.sum(*out.semantics));
  };
  std::vector<Param*> params;
  for (auto& p : store.all()) params.push_back(p.get());
  auto res = fd_check("grid_field", loss_fn, params, 300, 31);
  EXPECT_TRUE(res.pass) << res.max_rel_err;
}

TEST(CategoryField, DensityIgnoresTextureLatentAndDirection) {
  ParamStore store;
  CategoryDecoderConfig cfg;
  cfg.shape_layers = 4;
  cfg.texture_layers = 2;
  cfg.hidden = 32;
  CategoryDecoder dec(store, "cat0", cfg, 5);
  ObjectLibrary lib;
  lib.add_category(store, 0, 2, cfg.latent_dim_shape, cfg.latent_dim_texture, 5);
  lib.add_instance(100, 0);
  lib.add_instance(200, 0);

  Mat x = random_points(10, 1);
  auto run = [&](uint64_t dseed, double ztex_bump) {
    Tape t;
    std::vector<int> rows(10, lib.entry(100).row);
    Value zs = t.row_gather(t.leaf(lib.shape_latents(0)), rows);
    Param* zt = lib.texture_latents(0);
    double saved = zt->value[0];
    zt->value[0] += ztex_bump;
    Value ztv = t.row_gather(t.leaf(zt), rows);
    auto out = dec.eval(t, x, random_dirs(10, dseed), zs, ztv);
    zt->value[0] = saved;
    return std::vector<double>(out.density.data().begin(), out.density.data().end());
  };
  auto base = run(2, 0.0);
  auto other_dir = run(3, 0.0);
  auto other_tex = run(2, 0.5);
  for (int i = 0; i < 10; i++) {
    EXPECT_EQ(base[i], other_dir[i]);
    EXPECT_EQ(base[i], other_tex[i]);
  }
}

// two instances sharing one decoder, latents trained apart -> different fields
TEST(CategoryField, TrainedLatentsSeparateInstances) {
  ParamStore store;
  CategoryDecoderConfig cfg;
  cfg.shape_layers = 3;
  cfg.texture_layers = 2;
  cfg.hidden = 32;
  CategoryDecoder dec(store, "cat0", cfg, 5);
  ObjectLibrary lib;
  lib.add_category(store, 0, 2, cfg.latent_dim_shape, cfg.latent_dim_texture, 5);
  lib.add_instance(1, 0);
  lib.add_instance(2, 0);

  Mat x = random_points(32, 3);
  Param* zs = lib.shape_latents(0);
  std::vector<Param*> trainable;
  for (auto& p : store.all()) trainable.push_back(p.get());
  RAdam opt({{"all", trainable, 2e-3, 2e-3}}, 600);
  // push instance 1 dense and instance 2 empty at the same points; a shared
  // decoder can only satisfy both through the latent rows
  for (int step = 0; step < 500; step++) {
    store.zero_grad();
    Tape t;
    std::vector<int> r1(32, lib.entry(1).row), r2(32, lib.entry(2).row);
    Value s1 = dec.eval_density(t, x, t.row_gather(t.leaf(zs), r1));
    Value s2 = dec.eval_density(t, x, t.row_gather(t.leaf(zs), r2));
    Value target_hi = t.full(32, 1, 3.0);
    Value d1 = t.sub(s1, target_hi);
    Value loss = t.add(t.sum(t.mul(d1, d1)), t.sum(t.mul(s2, s2)));
    t.backward(loss);
    opt.step();
  }
  Tape t;
  std::vector<int> r1(32, lib.entry(1).row), r2(32, lib.entry(2).row);
  auto s1 = dec.eval_density(t, x, t.row_gather(t.leaf(zs), r1)).data();
  auto s2 = dec.eval_density(t, x, t.row_gather(t.leaf(zs), r2)).data();
  double mean1 = 0, mean2 = 0;
  for (int i = 0; i < 32; i++) {
    mean1 += s1[i];
    mean2 += s2[i];
  }
  EXPECT_GT(mean1 / 32, 4 * (mean2 / 32));
}

TEST(CategoryField, GradientFlowsIntoLatentsAndDecoder) {
  ParamStore store;
  CategoryDecoderConfig cfg;
  cfg.shape_layers = 3;
  cfg.texture_layers = 2;
  cfg.hidden = 16;
  cfg.pos_freqs = 3;
  cfg.dir_freqs = 2;
  CategoryDecoder dec(store, "cat0", cfg, 5);
  ObjectLibrary lib;
  lib.add_category(store, 0, 2, cfg.latent_dim_shape, cfg.latent_dim_texture, 5);
  lib.add_instance(1, 0);
  lib.add_instance(2, 0);

  Mat x = random_points(6, 3);
  Mat d = random_dirs(6, 4);
  Mat target(6, 3);
  Rng rng(12);
  for (auto& v : target.v) v = rng.uniform(0, 1);

  auto loss_fn = [&](Tape& t) {
    std::vector<int> rows = {0, 1, 0, 1, 0, 1};
    Value zsv = t.row_gather(t.leaf(lib.shape_latents(0)), rows);
    Value ztv = t.row_gather(t.leaf(lib.texture_latents(0)), rows);
    auto out = dec.eval(t, x, d, zsv, ztv);
    Value diff = t.sub(out.color, t.constant(target));
    return t.add(t.sum(t.mul(diff, diff)), t.sum(out.density));
  };
  std::vector<Param*> params;
  for (auto& p : store.all()) params.push_back(p.get());
  auto res = fd_check("category_field", loss_fn, params, 400, 77);
  EXPECT_TRUE(res.pass) << res.max_rel_err;

  // latents actually received gradient
  store.zero_grad();
  Tape t;
  t.backward(loss_fn(t));
  double gz = 0, gt = 0;
  for (double g : lib.shape_latents(0)->grad) gz += std::abs(g);
  for (double g : lib.texture_latents(0)->grad) gt += std::abs(g);
  EXPECT_GT(gz, 0.0);
  EXPECT_GT(gt, 0.0);
}

// decoder weights are shared storage; latent rows are per instance
TEST(CategoryField, SharedDecoderCoupling) {
  ParamStore store;
  CategoryDecoderConfig cfg;
  cfg.shape_layers = 3;
  cfg.texture_layers = 2;
  cfg.hidden = 16;
  CategoryDecoder dec(store, "cat0", cfg, 5);
  ObjectLibrary lib;
  lib.add_category(store, 0, 2, cfg.latent_dim_shape, cfg.latent_dim_texture, 5);
  lib.add_instance(1, 0);
  lib.add_instance(2, 0);

  Mat x = random_points(8, 3);
  auto eval_b = [&]() {
    Tape t;
    std::vector<int> rows(8, lib.entry(2).row);
    auto s = dec.eval_density(t, x, t.row_gather(t.leaf(lib.shape_latents(0)), rows)).data();
    return std::vector<double>(s.begin(), s.end());
  };
  auto base = eval_b();

  // perturb a decoder weight (a change driven by instance 1's loss would do this)
  Param* w = store.find("cat0/shape/w0");
  ASSERT_NE(w, nullptr);
  w->value[0] += 0.25;
  auto after_decoder = eval_b();
  w->value[0] -= 0.25;
  bool changed = false;
  for (size_t i = 0; i < base.size(); i++) changed |= base[i] != after_decoder[i];
  EXPECT_TRUE(changed);

  // perturb instance 1's latent row: instance 2 must not move
  Param* zs = lib.shape_latents(0);
  for (int k = 0; k < zs->cols; k++) zs->value[size_t(lib.entry(1).row) * zs->cols + k] += 0.5;
  auto after_za = eval_b();
  for (size_t i = 0; i < base.size(); i++) EXPECT_EQ(base[i], after_za[i]);
}

TEST(SkyFieldEval, PureFunctionOfDirection) {
  ParamStore store;
  SkyField sky(store, "sky", {}, 3);
  Mat d = random_dirs(5, 9);
  Tape t1, t2;
  auto c1 = sky.eval(t1, d).data();
  auto c2 = sky.eval(t2, d).data();
  for (size_t i = 0; i < c1.size(); i++) EXPECT_EQ(c1[i], c2[i]);
}

TEST(SkyFieldEval, GradientsMatchFiniteDifferences) {
  ParamStore store;
  SkyFieldConfig cfg;
  cfg.hidden = 16;
  cfg.layers = 2;
  SkyField sky(store, "sky", cfg, 3);
  Mat d = random_dirs(8, 10);
  auto loss_fn = [&](Tape& t) {
    Value c = sky.eval(t, d);
    return t.sum(t.mul(c, c));
  };
  std::vector<Param*> params;
  for (auto& p : store.all()) params.push_back(p.get());
  auto res = fd_check("sky_field", loss_fn, params, 200, 91);
  EXPECT_TRUE(res.pass) << res.max_rel_err;
}
