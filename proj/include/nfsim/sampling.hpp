// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Per-ray sample placement: stratified uniform bins, inverse-CDF resampling
// over weight histograms (coarse-to-fine), proposal-driven sampling, and
// truncated-sample flagging. All samplers are bit-reproducible under a
// fixed seed.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "nfsim/core.hpp"
#include "nfsim/geometry.hpp"

namespace nfsim {

// One node's samples along one ray. t strictly increasing; `truncated` may
// be set only on background-tagged sets.
struct SampleSet {
  bool is_background = true;
  int instance_id = -1;
  std::vector<double> t;
  std::vector<uint8_t> truncated;

  int size() const { return int(t.size()); }

  void assert_sorted() const {
    for (size_t i = 1; i < t.size(); i++)
      ensure(t[i] > t[i - 1], "sample set: t-values must be strictly increasing");
  }
};

// N stratified bins over [t_near, t_far]; deterministic mode places bin
// centers, stochastic mode jitters inside each bin.
inline SampleSet uniform_samples(double t_near, double t_far, int n, bool stochastic = false,
                                 Rng* rng = nullptr) {
  require(t_near < t_far, "uniform_samples: t_near < t_far required");
  require(n >= 1, "uniform_samples: n >= 1 required");
  SampleSet s;
  s.t.resize(n);
  const double w = (t_far - t_near) / n;
  for (int i = 0; i < n; i++) {
    double u = stochastic ? rng->uniform() : 0.5;
    s.t[i] = t_near + (i + u) * w;
  }
  s.truncated.assign(n, 0);
  return s;
}

// Inverse-CDF draws from a weight histogram, merge-sorted with any coarse
// samples supplied. All-zero weights fall back to uniform over the range.
inline SampleSet pdf_resample(const std::vector<double>& bin_edges,
                              const std::vector<double>& weights, int n_fine, uint64_t seed,
                              const std::vector<double>& coarse = {}, bool stochastic = false) {
  require(bin_edges.size() >= 2, "pdf_resample: need at least one bin");
  require(weights.size() + 1 == bin_edges.size(), "pdf_resample: edges/weights size mismatch");
  for (size_t i = 1; i < bin_edges.size(); i++)
    require(bin_edges[i] >= bin_edges[i - 1], "pdf_resample: edges must be sorted");
  double total = 0;
  for (double w : weights) {
    require(w >= 0, "pdf_resample: negative weight");
    total += w;
  }

  Rng rng(derive_seed(seed, 0xad5e));
  std::vector<double> fine(n_fine);
  if (total <= 1e-12) {
    // documented fallback: uniform over the full range
    const double lo = bin_edges.front(), hi = bin_edges.back();
    for (int i = 0; i < n_fine; i++) {
      double u = (i + (stochastic ? rng.uniform() : 0.5)) / n_fine;
      fine[i] = lo + u * (hi - lo);
    }
  } else {
    std::vector<double> cdf(weights.size() + 1, 0.0);
    for (size_t i = 0; i < weights.size(); i++) cdf[i + 1] = cdf[i] + weights[i] / total;
    cdf.back() = 1.0;
    int bin = 0;
    for (int i = 0; i < n_fine; i++) {
      double u = (i + (stochastic ? rng.uniform() : 0.5)) / n_fine;
      while (bin + 1 < int(weights.size()) && cdf[bin + 1] <= u) bin++;
      double span = cdf[bin + 1] - cdf[bin];
      double frac = span > 0 ? (u - cdf[bin]) / span : 0.5;
      fine[i] = bin_edges[bin] + frac * (bin_edges[bin + 1] - bin_edges[bin]);
    }
  }

  SampleSet out;
  out.t.reserve(fine.size() + coarse.size());
  std::merge(fine.begin(), fine.end(), coarse.begin(), coarse.end(), std::back_inserter(out.t));
  // collapse exact duplicates; strict ordering is an invariant downstream
  out.t.erase(std::unique(out.t.begin(), out.t.end()), out.t.end());
  out.truncated.assign(out.t.size(), 0);
  return out;
}

using DensityAt = std::function<std::vector<double>(const std::vector<double>&)>;

// Eq.-style transmittance weights over a histogram: w_i = T_i * alpha_i with
// delta taken from the bin widths.
inline std::vector<double> transmittance_weights(const std::vector<double>& sigma,
                                                 const std::vector<double>& delta) {
  std::vector<double> w(sigma.size());
  double acc = 0.0;  // running sum of sigma*delta
  for (size_t i = 0; i < sigma.size(); i++) {
    double sd = sigma[i] * delta[i];
    double trans = std::exp(-acc);
    w[i] = trans * (1.0 - std::exp(-sd));
    acc += sd;
  }
  return w;
}

struct ProposalHistogram {
  std::vector<double> edges;
  std::vector<double> weights;
};

struct ProposalResult {
  SampleSet samples;
  std::vector<ProposalHistogram> histograms;
};

// Iterated proposal sampling: uniform bins, then density -> weights ->
// resample per iteration. `density_at` evaluates the radiance-free proposal
// field at ray distances.
inline ProposalResult proposal_samples(const DensityAt& density_at, double t_near, double t_far,
                                       int iterations, int per_iter, int n_final, uint64_t seed,
                                       bool stochastic = false) {
  require(iterations >= 1, "proposal_samples: iterations >= 1");
  require(per_iter >= 2 && n_final >= 1, "proposal_samples: counts too small");
  ProposalResult res;

  std::vector<double> edges(per_iter + 1);
  for (int i = 0; i <= per_iter; i++)
    edges[i] = t_near + (t_far - t_near) * double(i) / per_iter;

  for (int iter = 0; iter < iterations; iter++) {
    std::vector<double> centers(edges.size() - 1), delta(edges.size() - 1);
    for (size_t i = 0; i + 1 < edges.size(); i++) {
      centers[i] = 0.5 * (edges[i] + edges[i + 1]);
      delta[i] = edges[i + 1] - edges[i];
    }
    std::vector<double> sigma = density_at(centers);
    ensure(sigma.size() == centers.size(), "proposal_samples: density size mismatch");
    ProposalHistogram hist;
    hist.edges = edges;
    hist.weights = transmittance_weights(sigma, delta);
    res.histograms.push_back(hist);

    const bool last = iter + 1 == iterations;
    int count = last ? n_final : per_iter;
    SampleSet drawn = pdf_resample(hist.edges, hist.weights, count,
                                   derive_seed(seed, 0x9e37, uint64_t(iter)), {}, stochastic);
    if (last) {
      res.samples = std::move(drawn);
      break;
    }
    // resampled points become the next iteration's bin edges
    edges.clear();
    edges.push_back(t_near);
    for (double t : drawn.t)
      if (t > edges.back() && t < t_far) edges.push_back(t);
    edges.push_back(t_far);
    if (edges.size() < 3) {  // degenerate draw; fall back to uniform bins
      edges.resize(per_iter + 1);
      for (int i = 0; i <= per_iter; i++)
        edges[i] = t_near + (t_far - t_near) * double(i) / per_iter;
    }
  }
  return res;
}

// Coarse-to-fine: stratified coarse pass, weights from the supplied density,
// then inverse-CDF fine samples merged with the coarse set.
inline SampleSet c2f_samples(const DensityAt& density_at, double t_near, double t_far,
                             int n_coarse, int n_fine, uint64_t seed, bool stochastic = false) {
  Rng rng(derive_seed(seed, 0xc2f));
  SampleSet coarse = uniform_samples(t_near, t_far, n_coarse, stochastic, &rng);
  std::vector<double> sigma = density_at(coarse.t);
  // bins around the coarse samples
  std::vector<double> edges(n_coarse + 1);
  edges[0] = t_near;
  for (int i = 0; i + 1 < n_coarse; i++) edges[i + 1] = 0.5 * (coarse.t[i] + coarse.t[i + 1]);
  edges[n_coarse] = t_far;
  std::vector<double> delta(n_coarse);
  for (int i = 0; i < n_coarse; i++) delta[i] = edges[i + 1] - edges[i];
  std::vector<double> w = transmittance_weights(sigma, delta);
  return pdf_resample(edges, w, n_fine, derive_seed(seed, 0xf1e), coarse.t, stochastic);
}

// Background samples falling inside any visible box interval get flagged;
// Eq.-8 style regularization consumes exactly these.
inline void flag_truncated(SampleSet& background, const std::vector<BoxInterval>& boxes) {
  require(background.is_background, "flag_truncated: background set required");
  background.truncated.assign(background.t.size(), 0);
  for (size_t i = 0; i < background.t.size(); i++) {
    for (const auto& b : boxes) {
      if (background.t[i] >= b.t_in && background.t[i] <= b.t_out) {
        background.truncated[i] = 1;
        break;
      }
    }
  }
}

}  // namespace nfsim
