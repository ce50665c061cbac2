// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "nfsim/core.hpp"
#include "nfsim/tensor.hpp"

namespace nfsim {

// Exponential interpolation between schedule endpoints.
inline double lr_at(int64_t step, int64_t total_steps, double lr_start, double lr_end) {
  require(total_steps > 0, "lr_at: total_steps must be positive");
  require(step >= 0 && step <= total_steps, "lr_at: step outside [0, total_steps]");
  require(lr_start > 0 && lr_end > 0, "lr_at: rates must be positive");
  return lr_start * std::pow(lr_end / lr_start, double(step) / double(total_steps));
}

struct RAdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One schedule per group ("background" vs "object" nodes train at different rates).
struct ParamGroup {
  std::string name;
  std::vector<ad::Param*> params;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
};

// Rectified Adam. The variance-rectification term kicks in once the
// approximated SMA length rho_t exceeds 4; earlier steps fall back to an
// unrectified momentum update.
class RAdam {
 public:
  RAdam(std::vector<ParamGroup> groups, int64_t total_steps, RAdamConfig cfg = {})
      : groups_(std::move(groups)), total_steps_(total_steps), cfg_(cfg) {
    for (auto& g : groups_)
      for (auto* p : g.params) {
        moments_.push_back(Moments{p, std::vector<double>(p->value.size(), 0.0),
                                   std::vector<double>(p->value.size(), 0.0)});
      }
  }

  // Consumes p->grad for every registered parameter.
  void step() {
    step_++;
    const int64_t t = step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double b1t = std::pow(b1, double(t));
    const double b2t = std::pow(b2, double(t));
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * double(t) * b2t / (1.0 - b2t);
    const bool rectified = rho_t > 4.0;
    double rect = 1.0;
    if (rectified) {
      rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }

    size_t mi = 0;
    for (auto& g : groups_) {
      const double lr = lr_at(std::min(t, total_steps_), total_steps_, g.lr_start, g.lr_end);
      for (auto* p : g.params) {
        Moments& mom = moments_[mi++];
        bool finite = true;
        for (double gv : p->grad)
          if (!std::isfinite(gv)) {
            finite = false;
            break;
          }
        if (!finite) {
          skipped_++;
          if (on_skip) on_skip(p->name, t);
          continue;
        }
        const size_t n = p->value.size();
        maybe_parallel_for(int64_t(n), [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; i++) {
            const double gv = p->grad[i];
            double& m = mom.m[i];
            double& v = mom.v[i];
            m = b1 * m + (1.0 - b1) * gv;
            v = b2 * v + (1.0 - b2) * gv * gv;
            const double mhat = m / (1.0 - b1t);
            if (rectified) {
              const double vhat = std::sqrt(v / (1.0 - b2t));
              p->value[i] -= lr * rect * mhat / (vhat + cfg_.eps);
            } else {
              p->value[i] -= lr * mhat;
            }
          }
        });
      }
    }
  }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  int64_t total_steps() const { return total_steps_; }
  int64_t skipped_nonfinite() const { return skipped_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  std::function<void(const std::string&, int64_t)> on_skip;

  // moment access for checkpointing, in registration order
  struct Moments {
    ad::Param* param;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Moments>& moments() { return moments_; }

 private:
  std::vector<ParamGroup> groups_;
  int64_t total_steps_;
  RAdamConfig cfg_;
  std::vector<Moments> moments_;
  int64_t step_ = 0;
  int64_t skipped_ = 0;
};

}  // namespace nfsim
