// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Scene representations behind one interface: position-encoded MLP field,
// multi-resolution hash-grid field, latent-conditioned category-level
// foreground field, and the direction-only sky field. Density depends on
// position (and shape latent) only; color may additionally depend on view
// direction (and texture latent).
#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nfsim/core.hpp"
#include "nfsim/geometry.hpp"
#include "nfsim/tensor.hpp"

namespace nfsim {

// ---------------------------------------------------------------------------
// positional encoding
// ---------------------------------------------------------------------------

inline int posenc_dim(int dim, int freqs) { return dim * (2 * freqs + 1); }

// Per component: sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{F-1} pi v),
// cos(2^{F-1} pi v); the raw input is appended at the end.
inline void posenc_into(const double* v, int dim, int freqs, double* out) {
  int k = 0;
  for (int c = 0; c < dim; c++) {
    double base = M_PI * v[c];
    double scale = 1.0;
    for (int f = 0; f < freqs; f++) {
      out[k++] = std::sin(scale * base);
      out[k++] = std::cos(scale * base);
      scale *= 2.0;
    }
  }
  for (int c = 0; c < dim; c++) out[k++] = v[c];
}

inline std::vector<double> posenc(const std::vector<double>& v, int freqs) {
  std::vector<double> out(posenc_dim(int(v.size()), freqs));
  posenc_into(v.data(), int(v.size()), freqs, out.data());
  return out;
}

inline ad::Mat posenc_rows(const ad::Mat& x, int freqs) {
  ad::Mat out(x.rows, posenc_dim(x.cols, freqs));
  const int in_c = x.cols, out_c = out.cols;
  maybe_parallel_for(x.rows, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; r++)
      posenc_into(x.v.data() + r * in_c, in_c, freqs, out.v.data() + r * out_c);
  });
  return out;
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

struct FieldOutput {
  ad::Value density;                   // [N,1], non-negative
  ad::Value color;                     // [N,3], in [0,1]
  std::optional<ad::Value> semantics;  // [N,K], rows are class distributions
};

inline ad::Value dense_layer(ad::Tape& t, ad::Value x, ad::Param* w, ad::Param* b) {
  return t.add(t.matmul(x, t.leaf(w)), t.leaf(b));
}

// Stack of relu layers; optional skip re-concatenates the input.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ad::ParamStore& store, const std::string& prefix, int in_dim, int hidden, int layers,
      int skip_at, uint64_t seed) {
    require(layers >= 1, "mlp: at least one layer");
    in_dim_ = in_dim;
    skip_at_ = skip_at;
    int cur = in_dim;
    for (int l = 0; l < layers; l++) {
      if (l == skip_at_) cur += in_dim;
      auto* w = store.create(prefix + "/w" + std::to_string(l), cur, hidden);
      auto* b = store.create(prefix + "/b" + std::to_string(l), 1, hidden);
      Rng rng(derive_seed(seed, std::hash<std::string>{}(w->name)));
      w->init_xavier(rng);
      weights_.push_back(w);
      biases_.push_back(b);
      cur = hidden;
    }
  }

  ad::Value forward(ad::Tape& t, ad::Value x) const {
    ad::Value h = x;
    for (size_t l = 0; l < weights_.size(); l++) {
      if (int(l) == skip_at_) h = t.concat({h, x}, 1);
      h = t.relu(dense_layer(t, h, weights_[l], biases_[l]));
    }
    return h;
  }

  int in_dim() const { return in_dim_; }

 private:
  std::vector<ad::Param*> weights_;
  std::vector<ad::Param*> biases_;
  int in_dim_ = 0;
  int skip_at_ = -1;
};

inline ad::Param* make_head(ad::ParamStore& store, const std::string& name, int in, int out,
                            uint64_t seed) {
  auto* w = store.create(name, in, out);
  Rng rng(derive_seed(seed, std::hash<std::string>{}(name)));
  w->init_xavier(rng);
  return w;
}

// row-wise softmax, shift by a detached row max for stability
inline ad::Value row_softmax(ad::Tape& t, ad::Value logits) {
  ad::Value shift = t.row_max(logits);  // non-differentiated by construction
  ad::Value e = t.exp(t.sub(logits, shift));
  ad::Value z = t.sum(e, 1);
  return t.div(e, z);
}

class Field {
 public:
  virtual ~Field() = default;
  // x: [N,3] canonical-domain positions; d: [N,3] unit directions
  virtual FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d) = 0;
  // density-only path for coarse passes; default pays for the full eval
  virtual ad::Value eval_density(ad::Tape& t, const ad::Mat& x) {
    ad::Mat d(x.rows, 3);
    for (int r = 0; r < x.rows; r++) d.at(r, 2) = 1.0;
    return eval(t, x, d).density;
  }
};

// ---------------------------------------------------------------------------
// position-encoded MLP field (vanilla layout: 8x64 trunk, skip at 4)
// ---------------------------------------------------------------------------

struct MlpFieldConfig {
  int pos_freqs = 6;
  int dir_freqs = 4;
  int hidden = 64;
  int layers = 8;
  int skip_at = 4;
  int semantic_classes = 0;  // 0 disables the head
};

class MlpField : public Field {
 public:
  MlpField(ad::ParamStore& store, const std::string& prefix, const MlpFieldConfig& cfg,
           uint64_t seed)
      : cfg_(cfg),
        trunk_(store, prefix + "/trunk", posenc_dim(3, cfg.pos_freqs), cfg.hidden, cfg.layers,
               cfg.skip_at, seed) {
    sigma_w_ = make_head(store, prefix + "/sigma_w", cfg.hidden, 1, seed);
    sigma_b_ = store.create(prefix + "/sigma_b", 1, 1);
    sigma_b_->value[0] = -1.0;  // near-transparent start
    feat_w_ = make_head(store, prefix + "/feat_w", cfg.hidden, cfg.hidden, seed);
    feat_b_ = store.create(prefix + "/feat_b", 1, cfg.hidden);
    color_w1_ = make_head(store, prefix + "/color_w1", cfg.hidden + posenc_dim(3, cfg.dir_freqs),
                          cfg.hidden, seed);
    color_b1_ = store.create(prefix + "/color_b1", 1, cfg.hidden);
    color_w2_ = make_head(store, prefix + "/color_w2", cfg.hidden, 3, seed);
    color_b2_ = store.create(prefix + "/color_b2", 1, 3);
    if (cfg.semantic_classes > 0) {
      sem_w_ = make_head(store, prefix + "/sem_w", cfg.hidden, cfg.semantic_classes, seed);
      sem_b_ = store.create(prefix + "/sem_b", 1, cfg.semantic_classes);
    }
  }

  FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d) override {
    ad::Value h = trunk_.forward(t, t.constant(posenc_rows(x, cfg_.pos_freqs)));
    FieldOutput out;
    out.density = t.softplus(dense_layer(t, h, sigma_w_, sigma_b_));
    ad::Value feat = dense_layer(t, h, feat_w_, feat_b_);
    ad::Value dir_enc = t.constant(posenc_rows(d, cfg_.dir_freqs));
    ad::Value c1 = t.relu(dense_layer(t, t.concat({feat, dir_enc}, 1), color_w1_, color_b1_));
    out.color = t.sigmoid(dense_layer(t, c1, color_w2_, color_b2_));
    if (sem_w_) out.semantics = row_softmax(t, dense_layer(t, h, sem_w_, sem_b_));
    return out;
  }

  ad::Value eval_density(ad::Tape& t, const ad::Mat& x) override {
    ad::Value h = trunk_.forward(t, t.constant(posenc_rows(x, cfg_.pos_freqs)));
    return t.softplus(dense_layer(t, h, sigma_w_, sigma_b_));
  }

 private:
  MlpFieldConfig cfg_;
  Mlp trunk_;
  ad::Param* sigma_w_ = nullptr;
  ad::Param* sigma_b_ = nullptr;
  ad::Param* feat_w_ = nullptr;
  ad::Param* feat_b_ = nullptr;
  ad::Param* color_w1_ = nullptr;
  ad::Param* color_b1_ = nullptr;
  ad::Param* color_w2_ = nullptr;
  ad::Param* color_b2_ = nullptr;
  ad::Param* sem_w_ = nullptr;
  ad::Param* sem_b_ = nullptr;
};

// ---------------------------------------------------------------------------
// multi-resolution hash grid
// ---------------------------------------------------------------------------

struct HashGridConfig {
  int levels = 8;
  int r_min = 16;
  int r_max = 1024;
  int table_log2 = 16;  // entries per level
  int features = 2;
  int hidden = 64;
  int geo_features = 15;
  int dir_freqs = 4;
  int semantic_classes = 0;
  double domain_lo = -2.0;  // canonical query cube
  double domain_hi = 2.0;

  void validate() const {
    require(levels >= 2, "hash grid: levels must be >= 2");
    require(r_min < r_max, "hash grid: R_min < R_max required");
    require(table_log2 >= 4 && table_log2 <= 28, "hash grid: table size out of range");
    require(domain_lo < domain_hi, "hash grid: empty domain");
  }
};

// b = exp((ln R_max - ln R_min)/(L-1)); R_l = floor(R_min * b^l), endpoints exact
inline std::vector<int> grid_levels(int r_min, int r_max, int levels) {
  require(levels >= 2, "grid_levels: levels must be >= 2");
  require(r_min < r_max, "grid_levels: R_min < R_max required");
  require(r_min >= 1, "grid_levels: R_min must be positive");
  double b = std::exp((std::log(double(r_max)) - std::log(double(r_min))) / double(levels - 1));
  std::vector<int> rs(levels);
  for (int l = 0; l < levels; l++) rs[l] = int(std::floor(double(r_min) * std::pow(b, l) + 1e-9));
  rs[0] = r_min;
  rs[levels - 1] = r_max;
  return rs;
}

// XOR-of-primes spatial hash, masked to the table size
inline uint32_t grid_hash(uint32_t x, uint32_t y, uint32_t z, uint32_t mask) {
  return (x * 1u ^ y * 2654435761u ^ z * 805459861u) & mask;
}

// Per-level corner plan for a batch of positions.
inline std::shared_ptr<ad::GatherPlan> make_gather_plan(const ad::Mat& x, int resolution,
                                                        uint32_t mask, double lo, double hi) {
  auto plan = std::make_shared<ad::GatherPlan>();
  plan->n = x.rows;
  plan->idx.resize(size_t(x.rows) * 8);
  plan->w.resize(size_t(x.rows) * 8);
  const double inv_span = 1.0 / (hi - lo);
  maybe_parallel_for(x.rows, [&](int64_t lo_r, int64_t hi_r) {
    for (int64_t r = lo_r; r < hi_r; r++) {
      double u[3], frac[3];
      uint32_t c0[3];
      for (int a = 0; a < 3; a++) {
        double t01 = (x.at(int(r), a) - lo) * inv_span;
        t01 = std::min(1.0, std::max(0.0, t01));
        double s = t01 * resolution;
        double fl = std::floor(s);
        if (fl > resolution - 1) fl = resolution - 1;  // keep the +1 corner on the lattice
        u[a] = s;
        c0[a] = uint32_t(fl);
        frac[a] = s - fl;
      }
      for (int corner = 0; corner < 8; corner++) {
        uint32_t cx = c0[0] + (corner & 1);
        uint32_t cy = c0[1] + ((corner >> 1) & 1);
        uint32_t cz = c0[2] + ((corner >> 2) & 1);
        double w = ((corner & 1) ? frac[0] : 1 - frac[0]) *
                   (((corner >> 1) & 1) ? frac[1] : 1 - frac[1]) *
                   (((corner >> 2) & 1) ? frac[2] : 1 - frac[2]);
        plan->idx[r * 8 + corner] = grid_hash(cx, cy, cz, mask);
        plan->w[r * 8 + corner] = w;
      }
    }
  });
  return plan;
}

class HashGridField : public Field {
 public:
  HashGridField(ad::ParamStore& store, const std::string& prefix, const HashGridConfig& cfg,
                uint64_t seed)
      : cfg_(cfg) {
    cfg_.validate();
    resolutions_ = grid_levels(cfg.r_min, cfg.r_max, cfg.levels);
    mask_ = (1u << cfg.table_log2) - 1;
    for (int l = 0; l < cfg.levels; l++) {
      auto* tab = store.create(prefix + "/table" + std::to_string(l), 1 << cfg.table_log2,
                               cfg.features);
      Rng rng(derive_seed(seed, std::hash<std::string>{}(tab->name)));
      tab->init_uniform(rng, -1e-4, 1e-4);
      tables_.push_back(tab);
    }
    const int lf = cfg.levels * cfg.features;
    density_w1_ = make_head(store, prefix + "/density_w1", lf, cfg.hidden, seed);
    density_b1_ = store.create(prefix + "/density_b1", 1, cfg.hidden);
    sigma_w_ = make_head(store, prefix + "/sigma_w", cfg.hidden, 1, seed);
    sigma_b_ = store.create(prefix + "/sigma_b", 1, 1);
    sigma_b_->value[0] = -1.0;
    geo_w_ = make_head(store, prefix + "/geo_w", cfg.hidden, cfg.geo_features, seed);
    geo_b_ = store.create(prefix + "/geo_b", 1, cfg.geo_features);
    const int cin = cfg.geo_features + posenc_dim(3, cfg.dir_freqs);
    color_w1_ = make_head(store, prefix + "/color_w1", cin, cfg.hidden, seed);
    color_b1_ = store.create(prefix + "/color_b1", 1, cfg.hidden);
    color_w2_ = make_head(store, prefix + "/color_w2", cfg.hidden, 3, seed);
    color_b2_ = store.create(prefix + "/color_b2", 1, 3);
    if (cfg.semantic_classes > 0) {
      sem_w_ = make_head(store, prefix + "/sem_w", cfg.hidden, cfg.semantic_classes, seed);
      sem_b_ = store.create(prefix + "/sem_b", 1, cfg.semantic_classes);
    }
  }

  // concatenated per-level trilinear lookups, [N, levels*features]
  ad::Value encode(ad::Tape& t, const ad::Mat& x) {
    std::vector<ad::Value> per_level;
    per_level.reserve(tables_.size());
    for (size_t l = 0; l < tables_.size(); l++) {
      auto plan = make_gather_plan(x, resolutions_[l], mask_, cfg_.domain_lo, cfg_.domain_hi);
      per_level.push_back(t.gather8(t.leaf(tables_[l]), plan));
    }
    return t.concat(per_level, 1);
  }

  FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d) override {
    ad::Value h = t.relu(dense_layer(t, encode(t, x), density_w1_, density_b1_));
    FieldOutput out;
    out.density = t.softplus(dense_layer(t, h, sigma_w_, sigma_b_));
    ad::Value geo = dense_layer(t, h, geo_w_, geo_b_);
    ad::Value dir_enc = t.constant(posenc_rows(d, cfg_.dir_freqs));
    ad::Value c1 = t.relu(dense_layer(t, t.concat({geo, dir_enc}, 1), color_w1_, color_b1_));
    out.color = t.sigmoid(dense_layer(t, c1, color_w2_, color_b2_));
    if (sem_w_) out.semantics = row_softmax(t, dense_layer(t, h, sem_w_, sem_b_));
    return out;
  }

  ad::Value eval_density(ad::Tape& t, const ad::Mat& x) override {
    ad::Value h = t.relu(dense_layer(t, encode(t, x), density_w1_, density_b1_));
    return t.softplus(dense_layer(t, h, sigma_w_, sigma_b_));
  }

  const std::vector<int>& resolutions() const { return resolutions_; }
  const HashGridConfig& config() const { return cfg_; }
  ad::Param* table(int level) const { return tables_[level]; }

 private:
  HashGridConfig cfg_;
  std::vector<int> resolutions_;
  uint32_t mask_ = 0;
  std::vector<ad::Param*> tables_;
  ad::Param* density_w1_ = nullptr;
  ad::Param* density_b1_ = nullptr;
  ad::Param* sigma_w_ = nullptr;
  ad::Param* sigma_b_ = nullptr;
  ad::Param* geo_w_ = nullptr;
  ad::Param* geo_b_ = nullptr;
  ad::Param* color_w1_ = nullptr;
  ad::Param* color_b1_ = nullptr;
  ad::Param* color_w2_ = nullptr;
  ad::Param* color_b2_ = nullptr;
  ad::Param* sem_w_ = nullptr;
  ad::Param* sem_b_ = nullptr;
};

// Radiance-free density field for the proposal sampler.
struct ProposalGridConfig {
  int levels = 4;
  int r_min = 16;
  int r_max = 256;
  int table_log2 = 14;
  int features = 2;
  int hidden = 32;
  double domain_lo = -2.0;
  double domain_hi = 2.0;
};

class ProposalGridField {
 public:
  ProposalGridField(ad::ParamStore& store, const std::string& prefix,
                    const ProposalGridConfig& cfg, uint64_t seed)
      : cfg_(cfg) {
    resolutions_ = grid_levels(cfg.r_min, cfg.r_max, cfg.levels);
    mask_ = (1u << cfg.table_log2) - 1;
    for (int l = 0; l < cfg.levels; l++) {
      auto* tab =
          store.create(prefix + "/table" + std::to_string(l), 1 << cfg.table_log2, cfg.features);
      Rng rng(derive_seed(seed, std::hash<std::string>{}(tab->name)));
      tab->init_uniform(rng, -1e-4, 1e-4);
      tables_.push_back(tab);
    }
    w1_ = make_head(store, prefix + "/w1", cfg.levels * cfg.features, cfg.hidden, seed);
    b1_ = store.create(prefix + "/b1", 1, cfg.hidden);
    w2_ = make_head(store, prefix + "/w2", cfg.hidden, 1, seed);
    b2_ = store.create(prefix + "/b2", 1, 1);
    b2_->value[0] = -1.0;
  }

  ad::Value eval_density(ad::Tape& t, const ad::Mat& x) {
    std::vector<ad::Value> per_level;
    for (size_t l = 0; l < tables_.size(); l++) {
      auto plan = make_gather_plan(x, resolutions_[l], mask_, cfg_.domain_lo, cfg_.domain_hi);
      per_level.push_back(t.gather8(t.leaf(tables_[l]), plan));
    }
    ad::Value h = t.relu(dense_layer(t, t.concat(per_level, 1), w1_, b1_));
    return t.softplus(dense_layer(t, h, w2_, b2_));
  }

 private:
  ProposalGridConfig cfg_;
  std::vector<int> resolutions_;
  uint32_t mask_ = 0;
  std::vector<ad::Param*> tables_;
  ad::Param* w1_ = nullptr;
  ad::Param* b1_ = nullptr;
  ad::Param* w2_ = nullptr;
  ad::Param* b2_ = nullptr;
};

// ---------------------------------------------------------------------------
// category-level foreground: shared decoders + per-instance latents
// ---------------------------------------------------------------------------

struct CategoryDecoderConfig {
  int pos_freqs = 6;
  int dir_freqs = 4;
  int shape_layers = 8;
  int texture_layers = 4;
  int hidden = 64;
  int shape_feature = 16;
  int latent_dim_shape = 16;
  int latent_dim_texture = 16;
};

// One shape net and one texture net per category, shared by every instance
// of that category.
class CategoryDecoder {
 public:
  CategoryDecoder(ad::ParamStore& store, const std::string& prefix,
                  const CategoryDecoderConfig& cfg, uint64_t seed)
      : cfg_(cfg),
        shape_net_(store, prefix + "/shape", posenc_dim(3, cfg.pos_freqs) + cfg.latent_dim_shape,
                   cfg.hidden, cfg.shape_layers, cfg.shape_layers / 2, seed),
        texture_net_(store, prefix + "/texture",
                     cfg.shape_feature + posenc_dim(3, cfg.dir_freqs) + cfg.latent_dim_texture,
                     cfg.hidden, cfg.texture_layers, -1, seed) {
    sigma_w_ = make_head(store, prefix + "/sigma_w", cfg.hidden, 1, seed);
    sigma_b_ = store.create(prefix + "/sigma_b", 1, 1);
    sigma_b_->value[0] = -0.5;
    feat_w_ = make_head(store, prefix + "/feat_w", cfg.hidden, cfg.shape_feature, seed);
    feat_b_ = store.create(prefix + "/feat_b", 1, cfg.shape_feature);
    rgb_w_ = make_head(store, prefix + "/rgb_w", cfg.hidden, 3, seed);
    rgb_b_ = store.create(prefix + "/rgb_b", 1, 3);
  }

  // z rows align with x/d rows
  FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d, ad::Value z_shape,
                   ad::Value z_texture) const {
    ad::Value pos_enc = t.constant(posenc_rows(x, cfg_.pos_freqs));
    ad::Value h = shape_net_.forward(t, t.concat({pos_enc, z_shape}, 1));
    FieldOutput out;
    out.density = t.softplus(dense_layer(t, h, sigma_w_, sigma_b_));
    ad::Value feat = dense_layer(t, h, feat_w_, feat_b_);
    ad::Value dir_enc = t.constant(posenc_rows(d, cfg_.dir_freqs));
    ad::Value tex = texture_net_.forward(t, t.concat({feat, dir_enc, z_texture}, 1));
    out.color = t.sigmoid(dense_layer(t, tex, rgb_w_, rgb_b_));
    return out;
  }

  // density ignores direction and texture latent by construction
  ad::Value eval_density(ad::Tape& t, const ad::Mat& x, ad::Value z_shape) const {
    ad::Value pos_enc = t.constant(posenc_rows(x, cfg_.pos_freqs));
    ad::Value h = shape_net_.forward(t, t.concat({pos_enc, z_shape}, 1));
    return t.softplus(dense_layer(t, h, sigma_w_, sigma_b_));
  }

  const CategoryDecoderConfig& config() const { return cfg_; }

 private:
  CategoryDecoderConfig cfg_;
  Mlp shape_net_;
  Mlp texture_net_;
  ad::Param* sigma_w_ = nullptr;
  ad::Param* sigma_b_ = nullptr;
  ad::Param* feat_w_ = nullptr;
  ad::Param* feat_b_ = nullptr;
  ad::Param* rgb_w_ = nullptr;
  ad::Param* rgb_b_ = nullptr;
};

// Latent codes per tracked instance, stored row-wise per category so a whole
// batch of samples can gather its codes in one op.
class ObjectLibrary {
 public:
  struct Entry {
    int category = -1;
    int row = -1;  // row in the category's latent matrices
  };

  void add_category(ad::ParamStore& store, int category, int n_instances, int k_shape,
                    int k_texture, uint64_t seed) {
    require(!latents_.count(category), "object library: duplicate category");
    CategoryLatents cl;
    cl.z_shape = store.create("fg/cat" + std::to_string(category) + "/z_shape",
                              std::max(n_instances, 1), k_shape);
    cl.z_texture = store.create("fg/cat" + std::to_string(category) + "/z_texture",
                                std::max(n_instances, 1), k_texture);
    Rng rs(derive_seed(seed, 0x5a5a, uint64_t(category)));
    cl.z_shape->init_uniform(rs, -0.1, 0.1);
    cl.z_texture->init_uniform(rs, -0.1, 0.1);
    cl.used_rows = 0;
    latents_.emplace(category, cl);
  }

  // registers an instance; the next free row is assigned
  void add_instance(int instance_id, int category) {
    require(!entries_.count(instance_id), "object library: duplicate instance id " +
                                              std::to_string(instance_id));
    auto it = latents_.find(category);
    require(it != latents_.end(),
            "object library: unknown category " + std::to_string(category));
    require(it->second.used_rows < it->second.z_shape->rows,
            "object library: latent rows exhausted for category " + std::to_string(category));
    entries_[instance_id] = Entry{category, it->second.used_rows++};
  }

  // new instance with its own randomly initialized latent row
  void add_instance_fresh(int instance_id, int category, uint64_t seed) {
    require(!entries_.count(instance_id), "object library: duplicate instance id " +
                                              std::to_string(instance_id));
    auto it = latents_.find(category);
    require(it != latents_.end(),
            "object library: unknown category " + std::to_string(category));
    auto& cl = it->second;
    if (cl.used_rows == cl.z_shape->rows) {
      cl.z_shape->append_rows(1);
      cl.z_texture->append_rows(1);
      Rng rng(seed);
      for (int k = 0; k < cl.z_shape->cols; k++)
        cl.z_shape->value[size_t(cl.used_rows) * cl.z_shape->cols + k] = rng.uniform(-0.1, 0.1);
      for (int k = 0; k < cl.z_texture->cols; k++)
        cl.z_texture->value[size_t(cl.used_rows) * cl.z_texture->cols + k] =
            rng.uniform(-0.1, 0.1);
    }
    entries_[instance_id] = Entry{category, cl.used_rows++};
  }

  // new instance sharing an existing instance's latent codes
  void add_instance_alias(int instance_id, int source_instance_id) {
    require(!entries_.count(instance_id), "object library: duplicate instance id");
    auto it = entries_.find(source_instance_id);
    require(it != entries_.end(), "object library: unknown source instance " +
                                      std::to_string(source_instance_id));
    entries_[instance_id] = it->second;
  }

  const Entry& entry(int instance_id) const {
    auto it = entries_.find(instance_id);
    require(it != entries_.end(),
            "object library: unknown instance id " + std::to_string(instance_id));
    return it->second;
  }

  bool has_instance(int instance_id) const { return entries_.count(instance_id) > 0; }
  bool has_category(int category) const { return latents_.count(category) > 0; }

  ad::Param* shape_latents(int category) const { return latents_.at(category).z_shape; }
  ad::Param* texture_latents(int category) const { return latents_.at(category).z_texture; }

  int max_instance_id() const {
    int m = -1;
    for (auto& [id, e] : entries_) m = std::max(m, id);
    return m;
  }

 private:
  struct CategoryLatents {
    ad::Param* z_shape = nullptr;
    ad::Param* z_texture = nullptr;
    int used_rows = 0;
  };
  std::map<int, CategoryLatents> latents_;
  std::map<int, Entry> entries_;
};

// Foreground node contract: batched evaluation in the instance's canonical
// cube, with the per-sample latent row supplied by the caller. Models without
// code conditioning simply ignore the rows.
class ForegroundModel {
 public:
  virtual ~ForegroundModel() = default;
  virtual FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d,
                           const std::vector<int>& latent_rows) = 0;
  virtual ad::Value eval_density(ad::Tape& t, const ad::Mat& x,
                                 const std::vector<int>& latent_rows) = 0;
};

class CategoryForegroundModel : public ForegroundModel {
 public:
  CategoryForegroundModel(ad::ParamStore& store, const std::string& prefix,
                          const CategoryDecoderConfig& cfg, ObjectLibrary& library, int category,
                          uint64_t seed)
      : decoder_(store, prefix, cfg, seed), library_(&library), category_(category) {}

  FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d,
                   const std::vector<int>& latent_rows) override {
    ad::Value zs = t.row_gather(t.leaf(library_->shape_latents(category_)), latent_rows);
    ad::Value zt = t.row_gather(t.leaf(library_->texture_latents(category_)), latent_rows);
    return decoder_.eval(t, x, d, zs, zt);
  }

  ad::Value eval_density(ad::Tape& t, const ad::Mat& x,
                         const std::vector<int>& latent_rows) override {
    ad::Value zs = t.row_gather(t.leaf(library_->shape_latents(category_)), latent_rows);
    return decoder_.eval_density(t, x, zs);
  }

  const CategoryDecoder& decoder() const { return decoder_; }

 private:
  CategoryDecoder decoder_;
  ObjectLibrary* library_;
  int category_;
};

// ---------------------------------------------------------------------------
// sky: MLP spherical environment map, function of direction only
// ---------------------------------------------------------------------------

struct SkyFieldConfig {
  int dir_freqs = 4;
  int hidden = 32;
  int layers = 3;
};

class SkyModel {
 public:
  virtual ~SkyModel() = default;
  virtual ad::Value eval(ad::Tape& t, const ad::Mat& d) const = 0;
};

class SkyField : public SkyModel {
 public:
  SkyField(ad::ParamStore& store, const std::string& prefix, const SkyFieldConfig& cfg,
           uint64_t seed)
      : cfg_(cfg),
        net_(store, prefix + "/net", posenc_dim(3, cfg.dir_freqs), cfg.hidden, cfg.layers, -1,
             seed) {
    rgb_w_ = make_head(store, prefix + "/rgb_w", cfg.hidden, 3, seed);
    rgb_b_ = store.create(prefix + "/rgb_b", 1, 3);
  }

  ad::Value eval(ad::Tape& t, const ad::Mat& d) const override {
    ad::Value h = net_.forward(t, t.constant(posenc_rows(d, cfg_.dir_freqs)));
    return t.sigmoid(dense_layer(t, h, rgb_w_, rgb_b_));
  }

 private:
  SkyFieldConfig cfg_;
  Mlp net_;
  ad::Param* rgb_w_ = nullptr;
  ad::Param* rgb_b_ = nullptr;
};

// ---------------------------------------------------------------------------
// function-backed models: exact, parameter-free field plumbing used to pin a
// scene to analytic ground truth (and by construction handy in tests)
// ---------------------------------------------------------------------------

class FunctionField : public Field {
 public:
  std::function<double(const Vec3&)> sigma_fn;
  std::function<Vec3(const Vec3&, const Vec3&)> color_fn;  // (position, direction)
  std::function<std::vector<double>(const Vec3&)> semantics_fn;  // optional
  int classes = 0;

  FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d) override {
    const int n = x.rows;
    ad::Mat sig(n, 1), col(n, 3);
    ad::Mat sem(n, std::max(classes, 1));
    for (int i = 0; i < n; i++) {
      Vec3 p{x.at(i, 0), x.at(i, 1), x.at(i, 2)};
      Vec3 dir{d.at(i, 0), d.at(i, 1), d.at(i, 2)};
      sig.at(i, 0) = sigma_fn(p);
      Vec3 c = color_fn(p, dir);
      col.at(i, 0) = c.x;
      col.at(i, 1) = c.y;
      col.at(i, 2) = c.z;
      if (classes > 0 && semantics_fn) {
        auto s = semantics_fn(p);
        for (int k = 0; k < classes; k++) sem.at(i, k) = s[k];
      }
    }
    FieldOutput out;
    out.density = t.constant(std::move(sig));
    out.color = t.constant(std::move(col));
    if (classes > 0) out.semantics = t.constant(std::move(sem));
    return out;
  }

  ad::Value eval_density(ad::Tape& t, const ad::Mat& x) override {
    ad::Mat sig(x.rows, 1);
    for (int i = 0; i < x.rows; i++)
      sig.at(i, 0) = sigma_fn({x.at(i, 0), x.at(i, 1), x.at(i, 2)});
    return t.constant(std::move(sig));
  }
};

class FunctionForegroundModel : public ForegroundModel {
 public:
  std::function<double(const Vec3&)> sigma_fn;                   // canonical cube coords
  std::function<Vec3(const Vec3&, const Vec3&)> color_fn;

  FieldOutput eval(ad::Tape& t, const ad::Mat& x, const ad::Mat& d,
                   const std::vector<int>&) override {
    const int n = x.rows;
    ad::Mat sig(n, 1), col(n, 3);
    for (int i = 0; i < n; i++) {
      Vec3 p{x.at(i, 0), x.at(i, 1), x.at(i, 2)};
      Vec3 dir{d.at(i, 0), d.at(i, 1), d.at(i, 2)};
      sig.at(i, 0) = sigma_fn(p);
      Vec3 c = color_fn(p, dir);
      col.at(i, 0) = c.x;
      col.at(i, 1) = c.y;
      col.at(i, 2) = c.z;
    }
    FieldOutput out;
    out.density = t.constant(std::move(sig));
    out.color = t.constant(std::move(col));
    return out;
  }

  ad::Value eval_density(ad::Tape& t, const ad::Mat& x, const std::vector<int>&) override {
    ad::Mat sig(x.rows, 1);
    for (int i = 0; i < x.rows; i++)
      sig.at(i, 0) = sigma_fn({x.at(i, 0), x.at(i, 1), x.at(i, 2)});
    return t.constant(std::move(sig));
  }
};

class FunctionSkyModel : public SkyModel {
 public:
  std::function<Vec3(const Vec3&)> color_fn;

  explicit FunctionSkyModel(std::function<Vec3(const Vec3&)> fn) : color_fn(std::move(fn)) {}

  ad::Value eval(ad::Tape& t, const ad::Mat& d) const override {
    ad::Mat col(d.rows, 3);
    for (int i = 0; i < d.rows; i++) {
      Vec3 c = color_fn({d.at(i, 0), d.at(i, 1), d.at(i, 2)});
      col.at(i, 0) = c.x;
      col.at(i, 1) = c.y;
      col.at(i, 2) = c.z;
    }
    return t.constant(std::move(col));
  }
};

}  // namespace nfsim
