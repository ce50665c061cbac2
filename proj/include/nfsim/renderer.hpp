// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Compositional volume rendering. Rays intersect the frame's tracklet boxes,
// every node places samples, background samples falling inside boxes get
// flagged, the union is sorted by world-space ray distance and rendered with
// the standard transmittance recurrence, and the sky fills the residual
// 1 - accum. One tape evaluation covers a whole batch of rays.
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "nfsim/image.hpp"
#include "nfsim/sampling.hpp"
#include "nfsim/scene_graph.hpp"

namespace nfsim {

struct RaySpec {
  Ray ray;
  int frame = 0;
  uint64_t key = 0;  // stable per-ray stream id, e.g. pixel index
};

struct RenderOptions {
  bool train = false;  // stochastic sampling; gradients recorded
  uint64_t seed = 0;
  int64_t step = 0;
  bool keep_proposal_histograms = false;  // distillation inputs (training)
};

// Packed per-iteration proposal histogram over the whole batch.
struct ProposalHistogramBatch {
  ad::Value weights;                // [R*bins, 1], differentiable
  int bins = 0;
  std::vector<double> edges;        // (bins+1) per ray, concatenated
};

// Background-only weight histogram per ray (distillation target, constants).
struct BackgroundHistogram {
  std::vector<double> edges;    // Nbg+1
  std::vector<double> weights;  // Nbg
};

struct RayBatchResult {
  int n_rays = 0;
  ad::Value rgb;        // [R,3]
  ad::Value depth;      // [R,1]
  ad::Value accum;      // [R,1]
  ad::Value semantics;  // [R,K]; invalid when the channel is disabled
  ad::Value weights;    // [N,1] h_i over merged samples
  ad::Value trunc_sigma;  // [M,1]; invalid when no sample is truncated
  std::shared_ptr<std::vector<int64_t>> seg;  // R+1 offsets into merged samples
  std::vector<double> t;                      // merged sample distances
  std::vector<double> delta;
  std::vector<int> node;  // -1 background, else instance id
  std::vector<uint8_t> truncated;
  std::vector<ProposalHistogramBatch> proposal_histograms;
  std::vector<BackgroundHistogram> background_histograms;  // one per ray
  int n_truncated = 0;
};

namespace detail {

struct MergedSample {
  double t = 0;
  double delta = 0;
  int node = -1;  // -1 background
  int category = -1;
  int lib_row = -1;
  int hit_index = -1;  // index into the ray's hit list
  uint8_t truncated = 0;
};

struct HitBox {
  Tracklet trk;
  double t_in = 0, t_out = 0;
  Pose world_to_box;
};

}  // namespace detail

class BatchRenderer {
 public:
  BatchRenderer(SceneGraph& graph, ad::Tape& tape, const RenderOptions& opts)
      : g_(graph), tape_(tape), opts_(opts) {}

  RayBatchResult render(const std::vector<RaySpec>& rays) {
    const int R = int(rays.size());
    require(R > 0, "render: empty ray batch");
    const double near = g_.bounds.near, far = g_.bounds.far;

    // ---- ray/box intersections ---------------------------------------------
    std::vector<std::vector<detail::HitBox>> hits(R);
    parallel_for(R, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; r++) {
        const auto& visible = g_.visible_objects(rays[r].frame);
        for (const auto& trk : visible) {
          auto iv = ray_box_intersect(rays[r].ray, trk.box);
          if (!iv) continue;
          double t0 = std::max(iv->t_in, near);
          double t1 = std::min(iv->t_out, far);
          if (t1 - t0 <= 1e-9) continue;
          detail::HitBox h;
          h.trk = trk;
          h.t_in = t0;
          h.t_out = t1;
          h.world_to_box = trk.box.pose.inverse();
          hits[r].push_back(h);
        }
        std::sort(hits[r].begin(), hits[r].end(),
                  [](const detail::HitBox& a, const detail::HitBox& b) {
                    return a.trk.instance_id < b.trk.instance_id;
                  });
      }
    });

    RayBatchResult res;
    res.n_rays = R;

    // ---- background sampling -----------------------------------------------
    std::vector<SampleSet> bg(R);
    sample_background(rays, bg, res);

    // truncated flags
    for (int r = 0; r < R; r++) {
      std::vector<BoxInterval> ivs;
      for (auto& h : hits[r]) ivs.push_back({h.t_in, h.t_out});
      flag_truncated(bg[r], ivs);
    }

    // ---- foreground sampling -----------------------------------------------
    // per (ray, hit box) sample lists
    std::vector<std::vector<std::vector<double>>> fg(R);
    sample_foreground(rays, hits, fg);

    // ---- merge by world-space distance -------------------------------------
    std::vector<std::vector<detail::MergedSample>> merged(R);
    parallel_for(R, [&](int64_t lo, int64_t hi) {
      for (int64_t r = lo; r < hi; r++) {
        auto& m = merged[r];
        for (int i = 0; i < bg[r].size(); i++) {
          detail::MergedSample s;
          s.t = bg[r].t[i];
          s.truncated = bg[r].truncated[i];
          m.push_back(s);
        }
        for (size_t hidx = 0; hidx < hits[r].size(); hidx++) {
          const auto& h = hits[r][hidx];
          const auto& entry = g_.library.entry(h.trk.instance_id);
          for (double t : fg[r][hidx]) {
            detail::MergedSample s;
            s.t = t;
            s.node = h.trk.instance_id;
            s.category = h.trk.box.category;
            s.lib_row = entry.row;
            s.hit_index = int(hidx);
            m.push_back(s);
          }
        }
        // sort by distance; ties resolve background first, then instance id
        std::sort(m.begin(), m.end(), [](const detail::MergedSample& a,
                                         const detail::MergedSample& b) {
          if (a.t != b.t) return a.t < b.t;
          return a.node < b.node;
        });
        for (size_t i = 0; i < m.size(); i++)
          m[i].delta = (i + 1 < m.size() ? m[i + 1].t : far) - m[i].t;
      }
    });

    // ---- pack --------------------------------------------------------------
    auto seg = std::make_shared<std::vector<int64_t>>(R + 1, 0);
    for (int r = 0; r < R; r++) (*seg)[r + 1] = (*seg)[r] + int64_t(merged[r].size());
    const int64_t N = (*seg)[R];
    res.seg = seg;
    res.t.resize(N);
    res.delta.resize(N);
    res.node.resize(N);
    res.truncated.resize(N);

    // group order: background block first, then per-category blocks
    std::vector<int> bg_rows;                    // merged flat index per bg sample
    std::map<int, std::vector<int>> cat_rows;    // category -> merged flat indices
    {
      int64_t flat = 0;
      for (int r = 0; r < R; r++)
        for (const auto& s : merged[r]) {
          res.t[flat] = s.t;
          res.delta[flat] = s.delta;
          res.node[flat] = s.node;
          res.truncated[flat] = s.truncated;
          if (s.node < 0)
            bg_rows.push_back(int(flat));
          else
            cat_rows[s.category].push_back(int(flat));
          flat++;
        }
    }

    // ---- field evaluation, grouped -----------------------------------------
    const int K = g_.semantic_classes;
    std::vector<ad::Value> sigma_parts, color_parts, sem_parts;
    std::vector<int> group_of_flat(N, -1);  // flat merged index -> row in group order
    int group_base = 0;

    {  // background block
      const int nb = int(bg_rows.size());
      ensure(nb > 0, "render: background produced no samples");
      ad::Mat x(nb, 3), d(nb, 3);
      for (int i = 0; i < nb; i++) {
        int64_t flat = bg_rows[i];
        int r = ray_of_flat(*seg, flat);
        Vec3 p = rays[r].ray.at(res.t[flat]);
        Vec3 pc = contract((p - g_.bounds.center) / g_.bounds.radius);
        x.at(i, 0) = pc.x;
        x.at(i, 1) = pc.y;
        x.at(i, 2) = pc.z;
        d.at(i, 0) = rays[r].ray.direction.x;
        d.at(i, 1) = rays[r].ray.direction.y;
        d.at(i, 2) = rays[r].ray.direction.z;
        group_of_flat[flat] = group_base + i;
      }
      group_base += nb;
      auto out = g_.background->eval(tape_, x, d);
      sigma_parts.push_back(out.density);
      color_parts.push_back(out.color);
      if (K > 0) {
        ensure(out.semantics.has_value(), "render: background field lacks the semantic head");
        sem_parts.push_back(*out.semantics);
      }
    }

    for (auto& [category, rows] : cat_rows) {
      const int nc = int(rows.size());
      auto dec_it = g_.foreground.find(category);
      require(dec_it != g_.foreground.end(),
              "render: no decoder for category " + std::to_string(category));
      ad::Mat x(nc, 3), d(nc, 3);
      std::vector<int> zrows(nc);
      for (int i = 0; i < nc; i++) {
        int64_t flat = rows[i];
        int r = ray_of_flat(*seg, flat);
        // locate the hit for this sample to reuse its cached inverse pose
        const auto& m = merged[r][flat - (*seg)[r]];
        const auto& h = hits[r][m.hit_index];
        Vec3 p = rays[r].ray.at(res.t[flat]);
        Vec3 pi = h.world_to_box.apply(p).cwise_div(h.trk.box.half_extents);
        Vec3 di = h.world_to_box.apply_dir(rays[r].ray.direction)
                      .cwise_div(h.trk.box.half_extents)
                      .normalized();
        x.at(i, 0) = pi.x;
        x.at(i, 1) = pi.y;
        x.at(i, 2) = pi.z;
        d.at(i, 0) = di.x;
        d.at(i, 1) = di.y;
        d.at(i, 2) = di.z;
        zrows[i] = m.lib_row;
        group_of_flat[flat] = group_base + i;
      }
      group_base += nc;
      auto out = dec_it->second->eval(tape_, x, d, zrows);
      sigma_parts.push_back(out.density);
      color_parts.push_back(out.color);
      if (K > 0) {
        // Eq.-3 one-hot: density lands at the instance's category index
        ad::Mat onehot(1, K);
        require(category >= 0 && category < K,
                "render: category " + std::to_string(category) + " outside semantic range");
        onehot.at(0, category) = 1.0;
        sem_parts.push_back(tape_.matmul(out.density, tape_.constant(onehot)));
      }
    }

    // merged-order permutation
    std::vector<int> perm(N);
    for (int64_t flat = 0; flat < N; flat++) perm[flat] = group_of_flat[flat];
    ad::Value sigma = tape_.row_gather(
        sigma_parts.size() == 1 ? sigma_parts[0] : tape_.concat(sigma_parts, 0), perm);
    ad::Value color = tape_.row_gather(
        color_parts.size() == 1 ? color_parts[0] : tape_.concat(color_parts, 0), perm);
    ad::Value sem;
    if (K > 0)
      sem = tape_.row_gather(sem_parts.size() == 1 ? sem_parts[0] : tape_.concat(sem_parts, 0),
                             perm);

    // ---- transmittance recurrence ------------------------------------------
    ad::Value delta_c = tape_.constant(int(N), 1, res.delta);
    ad::Value sd = tape_.mul(sigma, delta_c);
    ad::Value transmittance = tape_.exp(tape_.mul(tape_.seg_excumsum(sd, seg), tape_.scalar(-1.0)));
    ad::Value alpha = tape_.sub(tape_.scalar(1.0), tape_.exp(tape_.mul(sd, tape_.scalar(-1.0))));
    ad::Value h = tape_.mul(transmittance, alpha);
    res.weights = h;

    ad::Value accum = tape_.seg_sum(h, seg);
    res.accum = accum;
    ad::Value sky_w = tape_.sub(tape_.scalar(1.0), accum);  // [R,1]

    // sky color per ray
    ad::Mat dirs(R, 3);
    for (int r = 0; r < R; r++) {
      dirs.at(r, 0) = rays[r].ray.direction.x;
      dirs.at(r, 1) = rays[r].ray.direction.y;
      dirs.at(r, 2) = rays[r].ray.direction.z;
    }
    ad::Value c_sky = g_.sky->eval(tape_, dirs);

    res.rgb = tape_.add(tape_.seg_sum(tape_.mul(color, h), seg), tape_.mul(sky_w, c_sky));
    ad::Value t_c = tape_.constant(int(N), 1, res.t);
    res.depth = tape_.add(tape_.seg_sum(tape_.mul(t_c, h), seg),
                          tape_.mul(sky_w, tape_.scalar(g_.bounds.inf_sentinel())));
    if (K > 0) {
      ad::Mat sky_onehot(1, K);
      require(g_.sky_class >= 0 && g_.sky_class < K, "render: sky class outside semantic range");
      sky_onehot.at(0, g_.sky_class) = 1.0;
      res.semantics = tape_.add(tape_.seg_sum(tape_.mul(sem, h), seg),
                                tape_.mul(sky_w, tape_.constant(sky_onehot)));
    }

    // truncated background densities, Eq.-8 inputs
    std::vector<int> trunc_rows;
    for (int64_t flat = 0; flat < N; flat++)
      if (res.node[flat] < 0 && res.truncated[flat]) trunc_rows.push_back(int(flat));
    res.n_truncated = int(trunc_rows.size());
    if (!trunc_rows.empty()) res.trunc_sigma = tape_.row_gather(sigma, trunc_rows);

    // distillation targets: the background field's own weight placement per
    // ray, ignoring foreground occlusion (constants; gradient stays on the
    // proposal side)
    if (!res.proposal_histograms.empty()) {
      auto sig = sigma.data();
      res.background_histograms.resize(R);
      for (int r = 0; r < R; r++) {
        std::vector<double> ts, sg;
        for (int64_t flat = (*seg)[r]; flat < (*seg)[r + 1]; flat++)
          if (res.node[flat] < 0) {
            ts.push_back(res.t[flat]);
            sg.push_back(sig[flat]);
          }
        auto& hist = res.background_histograms[r];
        const int nb = int(ts.size());
        if (nb == 0) continue;
        hist.edges.resize(nb + 1);
        hist.edges[0] = near;
        for (int i = 0; i + 1 < nb; i++) hist.edges[i + 1] = 0.5 * (ts[i] + ts[i + 1]);
        hist.edges[nb] = far;
        std::vector<double> dl(nb);
        for (int i = 0; i < nb; i++) dl[i] = hist.edges[i + 1] - hist.edges[i];
        hist.weights = transmittance_weights(sg, dl);
      }
    }
    return res;
  }

 private:
  static int ray_of_flat(const std::vector<int64_t>& seg, int64_t flat) {
    int lo = 0, hi = int(seg.size()) - 1;
    while (hi - lo > 1) {
      int mid = (lo + hi) / 2;
      if (seg[mid] <= flat)
        lo = mid;
      else
        hi = mid;
    }
    return lo;
  }

  Vec3 contract_world(const Vec3& p) const {
    return contract((p - g_.bounds.center) / g_.bounds.radius);
  }

  // batched density of the background field at per-ray sample lists
  std::vector<double> bg_density_flat(const std::vector<RaySpec>& rays,
                                      const std::vector<std::vector<double>>& ts) {
    int64_t total = 0;
    for (auto& v : ts) total += int64_t(v.size());
    ad::Mat x(int(total), 3);
    int64_t flat = 0;
    for (size_t r = 0; r < ts.size(); r++)
      for (double t : ts[r]) {
        Vec3 pc = contract_world(rays[r].ray.at(t));
        x.at(int(flat), 0) = pc.x;
        x.at(int(flat), 1) = pc.y;
        x.at(int(flat), 2) = pc.z;
        flat++;
      }
    ad::NoGradGuard ng(tape_);
    ad::Value sigma = g_.background->eval_density(tape_, x);
    auto d = sigma.data();
    return std::vector<double>(d.begin(), d.end());
  }

  void sample_background(const std::vector<RaySpec>& rays, std::vector<SampleSet>& bg,
                         RayBatchResult& res) {
    const int R = int(rays.size());
    const double near = g_.bounds.near, far = g_.bounds.far;
    const auto& sc = g_.sampler;
    const bool stoch = opts_.train;

    auto ray_seed = [&](int r, uint64_t stream) {
      return derive_seed(opts_.seed, uint64_t(opts_.step), rays[r].key, stream);
    };

    if (sc.background == "uniform") {
      parallel_for(R, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; r++) {
          Rng rng(ray_seed(int(r), 1));
          bg[r] = uniform_samples(near, far, sc.bg_uniform, stoch, &rng);
        }
      });
      return;
    }

    if (sc.background == "c2f") {
      std::vector<std::vector<double>> coarse(R);
      for (int r = 0; r < R; r++) {
        Rng rng(ray_seed(r, 2));
        coarse[r] = uniform_samples(near, far, sc.bg_coarse, stoch, &rng).t;
      }
      std::vector<double> sigma = bg_density_flat(rays, coarse);
      int64_t flat = 0;
      for (int r = 0; r < R; r++) {
        const int nc = int(coarse[r].size());
        std::vector<double> edges(nc + 1), delta(nc);
        edges[0] = near;
        for (int i = 0; i + 1 < nc; i++) edges[i + 1] = 0.5 * (coarse[r][i] + coarse[r][i + 1]);
        edges[nc] = far;
        for (int i = 0; i < nc; i++) delta[i] = edges[i + 1] - edges[i];
        std::vector<double> sr(sigma.begin() + flat, sigma.begin() + flat + nc);
        flat += nc;
        std::vector<double> w = transmittance_weights(sr, delta);
        bg[r] = pdf_resample(edges, w, sc.bg_fine, ray_seed(r, 3), coarse[r], stoch);
      }
      return;
    }

    // proposal sampler
    ensure(g_.proposal != nullptr, "render: proposal sampler configured without a proposal field");
    const int bins = sc.proposal_per_iteration;
    std::vector<std::vector<double>> edges(R);
    for (int r = 0; r < R; r++) {
      edges[r].resize(bins + 1);
      for (int i = 0; i <= bins; i++) edges[r][i] = near + (far - near) * double(i) / bins;
    }
    const bool want_grad = opts_.train && opts_.keep_proposal_histograms;
    auto segs = std::make_shared<std::vector<int64_t>>();
    for (int r = 0; r <= R; r++) segs->push_back(int64_t(r) * bins);

    for (int iter = 0; iter < sc.proposal_iterations; iter++) {
      ad::Mat x(R * bins, 3);
      std::vector<double> delta_flat(size_t(R) * bins);
      for (int r = 0; r < R; r++)
        for (int i = 0; i < bins; i++) {
          double c = 0.5 * (edges[r][i] + edges[r][i + 1]);
          Vec3 pc = contract_world(rays[r].ray.at(c));
          x.at(r * bins + i, 0) = pc.x;
          x.at(r * bins + i, 1) = pc.y;
          x.at(r * bins + i, 2) = pc.z;
          delta_flat[size_t(r) * bins + i] = edges[r][i + 1] - edges[r][i];
        }
      ad::Value w;
      {
        std::unique_ptr<ad::NoGradGuard> ng;
        if (!want_grad) ng = std::make_unique<ad::NoGradGuard>(tape_);
        ad::Value sigma = g_.proposal->eval_density(tape_, x);
        ad::Value sd = tape_.mul(sigma, tape_.constant(R * bins, 1, delta_flat));
        ad::Value trans =
            tape_.exp(tape_.mul(tape_.seg_excumsum(sd, segs), tape_.scalar(-1.0)));
        ad::Value alpha =
            tape_.sub(tape_.scalar(1.0), tape_.exp(tape_.mul(sd, tape_.scalar(-1.0))));
        w = tape_.mul(trans, alpha);
      }
      if (want_grad) {
        ProposalHistogramBatch hist;
        hist.weights = w;
        hist.bins = bins;
        for (int r = 0; r < R; r++)
          hist.edges.insert(hist.edges.end(), edges[r].begin(), edges[r].end());
        res.proposal_histograms.push_back(std::move(hist));
      }

      auto wd = w.data();
      const bool last = iter + 1 == sc.proposal_iterations;
      for (int r = 0; r < R; r++) {
        std::vector<double> wr(wd.begin() + int64_t(r) * bins, wd.begin() + int64_t(r + 1) * bins);
        SampleSet drawn = pdf_resample(edges[r], wr, last ? sc.bg_final : bins,
                                       ray_seed(r, 16 + uint64_t(iter)), {}, stoch);
        if (last) {
          bg[r] = std::move(drawn);
        } else {
          auto& e = edges[r];
          e.clear();
          e.push_back(near);
          for (double t : drawn.t)
            if (t > e.back() && t < far) e.push_back(t);
          e.push_back(far);
          if (int(e.size()) != bins + 1) {
            // degenerate draw: reset to uniform bins
            e.resize(bins + 1);
            for (int i = 0; i <= bins; i++) e[i] = near + (far - near) * double(i) / bins;
          }
        }
      }
    }
  }

  void sample_foreground(const std::vector<RaySpec>& rays,
                         const std::vector<std::vector<detail::HitBox>>& hits,
                         std::vector<std::vector<std::vector<double>>>& fg) {
    const int R = int(rays.size());
    const auto& sc = g_.sampler;
    const bool stoch = opts_.train;
    auto ray_seed = [&](int r, uint64_t stream) {
      return derive_seed(opts_.seed, uint64_t(opts_.step), rays[r].key, stream);
    };

    // coarse pass
    std::vector<std::vector<std::vector<double>>> coarse(R);
    for (int r = 0; r < R; r++) {
      coarse[r].resize(hits[r].size());
      fg[r].resize(hits[r].size());
      for (size_t hgt = 0; hgt < hits[r].size(); hgt++) {
        Rng rng(ray_seed(r, 32 + hgt));
        coarse[r][hgt] =
            uniform_samples(hits[r][hgt].t_in, hits[r][hgt].t_out, sc.fg_coarse, stoch, &rng).t;
      }
    }
    if (sc.foreground == "uniform") {
      for (int r = 0; r < R; r++)
        for (size_t hgt = 0; hgt < hits[r].size(); hgt++) fg[r][hgt] = coarse[r][hgt];
      return;
    }

    // batched per-category density for all coarse samples
    struct PairRef {
      int r, h;
    };
    std::map<int, std::vector<PairRef>> by_cat;
    for (int r = 0; r < R; r++)
      for (size_t hgt = 0; hgt < hits[r].size(); hgt++)
        by_cat[hits[r][hgt].trk.box.category].push_back({r, int(hgt)});

    std::map<std::pair<int, int>, std::vector<double>> sigma_of_pair;
    for (auto& [category, pairs] : by_cat) {
      auto dec_it = g_.foreground.find(category);
      require(dec_it != g_.foreground.end(),
              "render: no decoder for category " + std::to_string(category));
      int64_t total = 0;
      for (auto& pr : pairs) total += int64_t(coarse[pr.r][pr.h].size());
      ad::Mat x(int(total), 3);
      std::vector<int> zrows(total);
      int64_t flat = 0;
      for (auto& pr : pairs) {
        const auto& h = hits[pr.r][pr.h];
        int row = g_.library.entry(h.trk.instance_id).row;
        for (double t : coarse[pr.r][pr.h]) {
          Vec3 pi = h.world_to_box.apply(rays[pr.r].ray.at(t)).cwise_div(h.trk.box.half_extents);
          x.at(int(flat), 0) = pi.x;
          x.at(int(flat), 1) = pi.y;
          x.at(int(flat), 2) = pi.z;
          zrows[flat] = row;
          flat++;
        }
      }
      std::vector<double> sig;
      {
        ad::NoGradGuard ng(tape_);
        ad::Value s = dec_it->second->eval_density(tape_, x, zrows);
        sig.assign(s.data().begin(), s.data().end());
      }
      flat = 0;
      for (auto& pr : pairs) {
        int n = int(coarse[pr.r][pr.h].size());
        sigma_of_pair[{pr.r, pr.h}] =
            std::vector<double>(sig.begin() + flat, sig.begin() + flat + n);
        flat += n;
      }
    }

    for (int r = 0; r < R; r++)
      for (size_t hgt = 0; hgt < hits[r].size(); hgt++) {
        const auto& h = hits[r][hgt];
        const auto& ct = coarse[r][hgt];
        const auto& sr = sigma_of_pair[{r, int(hgt)}];
        const int nc = int(ct.size());
        std::vector<double> edges(nc + 1), delta(nc);
        edges[0] = h.t_in;
        for (int i = 0; i + 1 < nc; i++) edges[i + 1] = 0.5 * (ct[i] + ct[i + 1]);
        edges[nc] = h.t_out;
        for (int i = 0; i < nc; i++) delta[i] = edges[i + 1] - edges[i];
        std::vector<double> w = transmittance_weights(sr, delta);
        fg[r][hgt] = pdf_resample(edges, w, sc.fg_fine, ray_seed(r, 64 + hgt), ct, stoch).t;
      }
  }

  SceneGraph& g_;
  ad::Tape& tape_;
  RenderOptions opts_;
};

// ---------------------------------------------------------------------------
// single-ray and whole-image fronts
// ---------------------------------------------------------------------------

struct RenderOutput {
  Vec3 rgb;
  double depth = 0;
  double accum = 0;
  std::vector<double> semantics;
  std::vector<double> weights;  // h_i per merged sample
  std::vector<double> t;
  std::vector<int> node;
  std::vector<double> trunc_sigma;
};

inline RenderOutput compose_and_render(SceneGraph& graph, const Ray& ray, int frame,
                                       RenderOptions opts = {}) {
  ad::Tape tape;
  ad::NoGradGuard ng(tape);
  BatchRenderer renderer(graph, tape, opts);
  RaySpec spec;
  spec.ray = ray;
  spec.frame = frame;
  spec.key = 0;
  auto batch = renderer.render({spec});

  RenderOutput out;
  auto rgb = batch.rgb.data();
  out.rgb = {rgb[0], rgb[1], rgb[2]};
  out.depth = batch.depth.data()[0];
  out.accum = batch.accum.data()[0];
  if (batch.semantics.valid()) {
    auto s = batch.semantics.data();
    out.semantics.assign(s.begin(), s.end());
  }
  auto w = batch.weights.data();
  out.weights.assign(w.begin(), w.end());
  out.t = batch.t;
  out.node = batch.node;
  if (batch.trunc_sigma.valid()) {
    auto ts = batch.trunc_sigma.data();
    out.trunc_sigma.assign(ts.begin(), ts.end());
  }
  for (double v : out.weights)
    ensure(std::isfinite(v), "render: non-finite output on ray (frame " +
                                 std::to_string(frame) + ")");
  ensure(std::isfinite(out.rgb.x) && std::isfinite(out.rgb.y) && std::isfinite(out.rgb.z) &&
             std::isfinite(out.depth),
         "render: non-finite output on ray (frame " + std::to_string(frame) + ")");
  return out;
}

struct RenderedImages {
  ImageF rgb;       // 3 channels
  ImageF depth;     // meters
  ImageF accum;     // [0,1]
  ImageU8 semantics;  // argmax label per pixel (empty when disabled)
};

inline RenderedImages render_image(SceneGraph& graph, const Camera& cam, const Pose& cam_to_world,
                                   int frame, RenderOptions opts = {}, int chunk = 2048) {
  cam.validate();
  RenderedImages out;
  out.rgb = ImageF(cam.width, cam.height, 3);
  out.depth = ImageF(cam.width, cam.height, 1);
  out.accum = ImageF(cam.width, cam.height, 1);
  const int K = graph.semantic_classes;
  if (K > 0) out.semantics = ImageU8(cam.width, cam.height, 1);

  const int64_t total = int64_t(cam.width) * cam.height;
  for (int64_t base = 0; base < total; base += chunk) {
    const int n = int(std::min<int64_t>(chunk, total - base));
    std::vector<RaySpec> rays(n);
    for (int i = 0; i < n; i++) {
      int64_t pix = base + i;
      int px = int(pix % cam.width), py = int(pix / cam.width);
      rays[i].ray = generate_ray(cam, cam_to_world, double(px), double(py));
      rays[i].frame = frame;
      rays[i].key = uint64_t(frame) << 32 | uint64_t(pix);
    }
    ad::Tape tape;
    ad::NoGradGuard ng(tape);
    BatchRenderer renderer(graph, tape, opts);
    auto batch = renderer.render(rays);
    auto rgb = batch.rgb.data();
    auto depth = batch.depth.data();
    auto accm = batch.accum.data();
    for (int i = 0; i < n; i++) {
      int64_t pix = base + i;
      int px = int(pix % cam.width), py = int(pix / cam.width);
      for (int c = 0; c < 3; c++) {
        double v = rgb[size_t(i) * 3 + c];
        ensure(std::isfinite(v), "render: non-finite color at pixel (" + std::to_string(px) +
                                     ", " + std::to_string(py) + ") frame " +
                                     std::to_string(frame));
        out.rgb.at(px, py, c) = std::clamp(v, 0.0, 1.0);
      }
      out.depth.at(px, py) = depth[i];
      out.accum.at(px, py) = std::clamp(accm[i], 0.0, 1.0);
      if (K > 0) {
        auto s = batch.semantics.data();
        int best = 0;
        double bv = -1;
        for (int k = 0; k < K; k++)
          if (s[size_t(i) * K + k] > bv) {
            bv = s[size_t(i) * K + k];
            best = k;
          }
        out.semantics.at(px, py) = uint8_t(best);
      }
    }
  }
  return out;
}

}  // namespace nfsim
