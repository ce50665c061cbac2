// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of tape gradients. The checker
// rebuilds the loss from scratch for every probe, so it stays independent
// of the backward implementation it validates.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "nfsim/core.hpp"
#include "nfsim/tensor.hpp"

namespace nfsim {

struct GradCheckResult {
  std::string name;
  int probes = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};

// relative error with a floor so near-zero gradient pairs compare sanely
inline double rel_err(double analytic, double numeric) {
  double denom = std::abs(analytic) + std::abs(numeric);
  if (denom < 1e-8) return 0.0;
  return std::abs(analytic - numeric) / std::max(denom, 1e-4);
}

// loss_fn must build a fresh scalar loss from the current parameter values.
// Probes parameter entries round-robin across params, random entry per probe.
// `fault` (when not kLeaf) negates one op's backward rule so the checker can
// demonstrate it detects broken gradients.
inline GradCheckResult fd_check(const std::string& name,
                                const std::function<ad::Value(ad::Tape&)>& loss_fn,
                                std::vector<ad::Param*> params, int probes, uint64_t seed,
                                double h = 1e-5, double tol = 1e-4,
                                ad::Op fault = ad::Op::kLeaf) {
  GradCheckResult res;
  res.name = name;
  res.probes = probes;

  // analytic gradients once
  for (auto* p : params) p->zero_grad();
  {
    ad::Tape tape;
    ad::Value loss = loss_fn(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  Rng rng(derive_seed(seed, 0x9d0c));
  for (int k = 0; k < probes; k++) {
    ad::Param* p = params[k % params.size()];
    size_t i = size_t(rng.uniform_i64(int64_t(p->value.size())));
    const double saved = p->value[i];
    p->value[i] = saved + h;
    double fp;
    {
      ad::Tape tape;
      fp = loss_fn(tape).scalar();
    }
    p->value[i] = saved - h;
    double fm;
    {
      ad::Tape tape;
      fm = loss_fn(tape).scalar();
    }
    p->value[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    size_t pi = 0;
    while (params[pi] != p) pi++;
    const double e = rel_err(analytic[pi][i], numeric);
    if (e > res.max_rel_err) res.max_rel_err = e;
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

}  // namespace nfsim
