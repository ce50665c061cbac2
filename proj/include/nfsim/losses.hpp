// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Training objective: weighted sum of color MSE, a depth term (sensor ray
// distribution or mono-depth with learnable scale/shift), semantic cross
// entropy over accumulated logits, sky BCE on 1 - accum, the truncated-sample
// density regularizer, and the proposal histogram-consistency term.
#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "nfsim/renderer.hpp"
#include "nfsim/tensor.hpp"

namespace nfsim {

struct LossWeights {
  double color = 1.0;     // lambda_1
  double depth = 0.1;     // lambda_2
  double semantic = 0.05; // lambda_3
  double sky = 0.01;      // lambda_4
  double accum = 0.01;    // lambda_5
  double proposal = 1.0;  // sampler distillation (not part of the weighted five)
};

constexpr double kBceEps = 1e-6;
constexpr double kSemanticEps = 1e-6;

// squared color error summed over channels, averaged over the batch
inline ad::Value color_loss(ad::Tape& t, ad::Value rgb_pred, const ad::Mat& rgb_gt) {
  require(rgb_pred.rows() == rgb_gt.rows && rgb_pred.cols() == rgb_gt.cols,
          "color_loss: prediction/target shape mismatch");
  ad::Value diff = t.sub(rgb_pred, t.constant(rgb_gt));
  return t.mul(t.sum(t.mul(diff, diff)), t.scalar(1.0 / rgb_pred.rows()));
}

// Negative log of the blend-weight mass near the true depth under a Gaussian
// kernel of width sigma_hat. Rays with depth_gt = NaN are skipped.
inline ad::Value sensor_depth_loss(ad::Tape& t, ad::Value weights,
                                   std::shared_ptr<std::vector<int64_t>> seg,
                                   const std::vector<double>& sample_t,
                                   const std::vector<double>& sample_delta,
                                   const std::vector<double>& depth_gt, double sigma_hat) {
  require(sigma_hat > 0, "sensor_depth_loss: sigma_hat must be positive");
  const int R = int(seg->size()) - 1;
  require(int(depth_gt.size()) == R, "sensor_depth_loss: one target per ray required");

  // constant Gaussian kernel x interval width per sample
  std::vector<double> kernel(sample_t.size(), 0.0);
  std::vector<int> valid_rows;
  const double inv2s2 = 1.0 / (2.0 * sigma_hat * sigma_hat);
  for (int r = 0; r < R; r++) {
    if (!std::isfinite(depth_gt[r])) continue;
    valid_rows.push_back(r);
    for (int64_t i = (*seg)[r]; i < (*seg)[r + 1]; i++) {
      double dt = sample_t[i] - depth_gt[r];
      kernel[i] = std::exp(-dt * dt * inv2s2) * sample_delta[i];
    }
  }
  if (valid_rows.empty()) return t.scalar(0.0);
  ad::Value mass = t.seg_sum(t.mul(weights, t.constant(int(sample_t.size()), 1, kernel)), seg);
  ad::Value sel = t.row_gather(mass, valid_rows);
  ad::Value logmass = t.log(t.clamp(sel, 1e-12, 1e12));
  return t.mul(t.sum(logmass), t.scalar(-1.0 / double(valid_rows.size())));
}

// || w * d_hat + q - D ||^2 with learnable scale/shift, batch mean over rays
// carrying mono supervision (NaN skips a ray).
inline ad::Value mono_depth_loss(ad::Tape& t, ad::Value depth_pred,
                                 const std::vector<double>& depth_gt, ad::Param* scale,
                                 ad::Param* shift) {
  require(int(depth_gt.size()) == depth_pred.rows(), "mono_depth_loss: one target per ray");
  std::vector<int> valid_rows;
  std::vector<double> targets;
  for (int r = 0; r < int(depth_gt.size()); r++)
    if (std::isfinite(depth_gt[r])) {
      valid_rows.push_back(r);
      targets.push_back(depth_gt[r]);
    }
  if (valid_rows.empty()) return t.scalar(0.0);
  ad::Value pred = t.row_gather(depth_pred, valid_rows);
  ad::Value fitted = t.add(t.mul(pred, t.leaf(scale)), t.leaf(shift));
  ad::Value diff = t.sub(fitted, t.constant(int(targets.size()), 1, targets));
  return t.mul(t.sum(t.mul(diff, diff)), t.scalar(1.0 / double(valid_rows.size())));
}

// Cross-entropy of the accumulated semantic logits renormalized by accum.
// Labels < 0 skip the ray; labels >= K are rejected.
inline ad::Value semantic_loss(ad::Tape& t, ad::Value sem_pred, ad::Value accum,
                               const std::vector<int>& labels) {
  const int K = sem_pred.cols();
  require(int(labels.size()) == sem_pred.rows(), "semantic_loss: one label per ray");
  std::vector<int> valid_rows;
  std::vector<int> valid_labels;
  for (int r = 0; r < int(labels.size()); r++) {
    if (labels[r] < 0) continue;
    require(labels[r] < K, "semantic_loss: label " + std::to_string(labels[r]) +
                               " outside [0, " + std::to_string(K) + ")");
    valid_rows.push_back(r);
    valid_labels.push_back(labels[r]);
  }
  if (valid_rows.empty()) return t.scalar(0.0);
  ad::Value sel = t.select_col(t.row_gather(sem_pred, valid_rows), valid_labels);
  ad::Value denom = t.add(t.row_gather(accum, valid_rows), t.scalar(kSemanticEps));
  ad::Value p = t.clamp(t.div(sel, denom), kSemanticEps, 1.0);
  return t.mul(t.sum(t.log(p)), t.scalar(-1.0 / double(valid_rows.size())));
}

// BCE(1 - accum, sky mask); inputs clamped to keep gradients finite.
inline ad::Value sky_loss(ad::Tape& t, ad::Value accum, const std::vector<double>& sky_mask) {
  require(int(sky_mask.size()) == accum.rows(), "sky_loss: one mask entry per ray");
  for (double m : sky_mask) require(m == 0.0 || m == 1.0, "sky_loss: mask must be binary");
  const int R = accum.rows();
  ad::Value x = t.clamp(t.sub(t.scalar(1.0), accum), kBceEps, 1.0 - kBceEps);
  ad::Value y = t.constant(R, 1, sky_mask);
  ad::Value pos = t.mul(y, t.log(x));
  ad::Value neg = t.mul(t.sub(t.scalar(1.0), y), t.log(t.sub(t.scalar(1.0), x)));
  return t.mul(t.sum(t.add(pos, neg)), t.scalar(-1.0 / R));
}

// Density sum over background truncated samples, batch mean per ray.
inline ad::Value accum_loss(ad::Tape& t, ad::Value trunc_sigma, int n_rays) {
  require(n_rays >= 1, "accum_loss: n_rays must be positive");
  if (!trunc_sigma.valid()) return t.scalar(0.0);
  return t.mul(t.sum(trunc_sigma), t.scalar(1.0 / double(n_rays)));
}

// Histogram bound consistency: proposal weights must upper-bound final-field
// weight mass over every overlapping interval. Gradient reaches the proposal
// side only; the final weights arrive as constants.
inline ad::Value proposal_distillation_loss(ad::Tape& t, const ProposalHistogramBatch& hist,
                                            const std::vector<BackgroundHistogram>& finals) {
  const int R = int(finals.size());
  const int bins = hist.bins;
  require(hist.weights.rows() == R * bins, "distillation: histogram batch shape mismatch");

  auto segs = std::make_shared<std::vector<int64_t>>();
  for (int r = 0; r <= R; r++) segs->push_back(int64_t(r) * bins);
  ad::Value prefix = t.seg_excumsum(hist.weights, segs);     // [R*bins,1]
  ad::Value totals = t.seg_sum(hist.weights, segs);          // [R,1]
  ad::Value table = t.concat({prefix, totals}, 0);           // prefix(k), k==bins -> total

  std::vector<int> lo_idx, hi_idx;
  std::vector<double> target_w;
  for (int r = 0; r < R; r++) {
    const double* pe = hist.edges.data() + size_t(r) * (bins + 1);
    const auto& fin = finals[r];
    for (size_t i = 0; i + 1 < fin.edges.size(); i++) {
      double lo = fin.edges[i], hi = fin.edges[i + 1];
      if (fin.weights[i] <= 0) continue;
      // contiguous range of proposal bins overlapping [lo, hi)
      int j0 = int(std::upper_bound(pe, pe + bins + 1, lo) - pe) - 1;
      int j1 = int(std::lower_bound(pe, pe + bins + 1, hi) - pe) - 1;
      j0 = std::max(0, std::min(j0, bins - 1));
      j1 = std::max(j0, std::min(j1, bins - 1));
      lo_idx.push_back(r * bins + j0);
      hi_idx.push_back(j1 + 1 == bins ? R * bins + r : r * bins + j1 + 1);
      target_w.push_back(fin.weights[i]);
    }
  }
  if (target_w.empty()) return t.scalar(0.0);
  ad::Value bound = t.sub(t.row_gather(table, hi_idx), t.row_gather(table, lo_idx));
  ad::Value wf = t.constant(int(target_w.size()), 1, target_w);
  ad::Value excess = t.relu(t.sub(wf, bound));
  std::vector<double> inv(target_w.size());
  for (size_t i = 0; i < target_w.size(); i++) inv[i] = 1.0 / (target_w[i] + 1e-7);
  ad::Value scaled = t.mul(t.mul(excess, excess), t.constant(int(inv.size()), 1, inv));
  return t.mul(t.sum(scaled), t.scalar(1.0 / double(R)));
}

struct LossComponents {
  ad::Value color;
  ad::Value depth;
  ad::Value semantic;
  ad::Value sky;
  ad::Value accum;
  ad::Value proposal;
};

// lambda-weighted sum; absent supervision contributes nothing
inline ad::Value total_loss(ad::Tape& t, const LossComponents& parts, const LossWeights& w) {
  ad::Value total = t.scalar(0.0);
  auto take = [&](ad::Value v, double lambda) {
    require(lambda >= 0, "total_loss: weights must be non-negative");
    if (v.valid() && lambda != 0.0) total = t.add(total, t.mul(v, t.scalar(lambda)));
  };
  take(parts.color, w.color);
  take(parts.depth, w.depth);
  take(parts.semantic, w.semantic);
  take(parts.sky, w.sky);
  take(parts.accum, w.accum);
  take(parts.proposal, w.proposal);
  return total;
}

}  // namespace nfsim
