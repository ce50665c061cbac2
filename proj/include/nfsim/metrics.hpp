// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Image-quality metrics. SSIM follows the original published defaults:
// 11x11 Gaussian window (sigma 1.5), C1 = (0.01 peak)^2, C2 = (0.03 peak)^2,
// computed on the grayscale conversion.
#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "nfsim/image.hpp"

namespace nfsim {

constexpr double kPsnrCap = 99.0;

inline double psnr(const ImageF& a, const ImageF& b, double peak = 1.0) {
  require(a.width == b.width && a.height == b.height && a.channels == b.channels,
          "psnr: shape mismatch");
  double mse = image_mse(a, b);
  if (mse <= 0) return kPsnrCap;
  double v = 10.0 * std::log10(peak * peak / mse);
  return std::min(v, kPsnrCap);
}

inline ImageF to_gray(const ImageF& img) {
  if (img.channels == 1) return img;
  require(img.channels == 3, "to_gray: expected rgb");
  ImageF g(img.width, img.height, 1);
  for (int y = 0; y < img.height; y++)
    for (int x = 0; x < img.width; x++)
      g.at(x, y) = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
  return g;
}

inline double ssim(const ImageF& a_in, const ImageF& b_in, double peak = 1.0) {
  require(a_in.width == b_in.width && a_in.height == b_in.height &&
              a_in.channels == b_in.channels,
          "ssim: shape mismatch");
  constexpr int kWindow = 11;
  constexpr double kSigma = 1.5;
  require(a_in.width >= kWindow && a_in.height >= kWindow,
          "ssim: image smaller than the 11x11 window");
  ImageF a = to_gray(a_in);
  ImageF b = to_gray(b_in);

  double kernel[kWindow];
  double ksum = 0;
  for (int i = 0; i < kWindow; i++) {
    double d = i - kWindow / 2;
    kernel[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    ksum += kernel[i];
  }
  for (int i = 0; i < kWindow; i++) kernel[i] /= ksum;

  auto blur = [&](const ImageF& src) {
    ImageF tmp(src.width, src.height, 1), dst(src.width, src.height, 1);
    for (int y = 0; y < src.height; y++)
      for (int x = 0; x < src.width; x++) {
        double s = 0;
        for (int k = 0; k < kWindow; k++) {
          int xx = std::clamp(x + k - kWindow / 2, 0, src.width - 1);
          s += kernel[k] * src.at(xx, y);
        }
        tmp.at(x, y) = s;
      }
    for (int y = 0; y < src.height; y++)
      for (int x = 0; x < src.width; x++) {
        double s = 0;
        for (int k = 0; k < kWindow; k++) {
          int yy = std::clamp(y + k - kWindow / 2, 0, src.height - 1);
          s += kernel[k] * tmp.at(x, yy);
        }
        dst.at(x, y) = s;
      }
    return dst;
  };

  ImageF aa(a.width, a.height, 1), bb(a.width, a.height, 1), ab(a.width, a.height, 1);
  for (size_t i = 0; i < a.data.size(); i++) {
    aa.data[i] = a.data[i] * a.data[i];
    bb.data[i] = b.data[i] * b.data[i];
    ab.data[i] = a.data[i] * b.data[i];
  }
  ImageF mu_a = blur(a), mu_b = blur(b);
  ImageF m_aa = blur(aa), m_bb = blur(bb), m_ab = blur(ab);

  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0;
  for (size_t i = 0; i < a.data.size(); i++) {
    double ma = mu_a.data[i], mb = mu_b.data[i];
    double va = m_aa.data[i] - ma * ma;
    double vb = m_bb.data[i] - mb * mb;
    double cov = m_ab.data[i] - ma * mb;
    double num = (2 * ma * mb + c1) * (2 * cov + c2);
    double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
    total += num / den;
  }
  return total / double(a.data.size());
}

struct MetricRow {
  int frame_id = 0;
  double psnr_db = 0;
  double ssim = 0;
};

struct MetricReport {
  std::string split_name;
  std::vector<MetricRow> rows;

  double mean_psnr() const {
    double s = 0;
    for (auto& r : rows) s += r.psnr_db;
    return rows.empty() ? 0 : s / double(rows.size());
  }
  double mean_ssim() const {
    double s = 0;
    for (auto& r : rows) s += r.ssim;
    return rows.empty() ? 0 : s / double(rows.size());
  }

  // frame_id, psnr_db, ssim rows plus a mean summary row; lpips is not
  // computed (needs a pretrained perceptual network) and is reported n/a
  std::string to_csv() const {
    std::ostringstream out;
    out << "frame_id,psnr_db,ssim\n";
    out << "# split: " << split_name << "; lpips: n/a (requires a pretrained network)\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f\n", r.frame_id, r.psnr_db, r.ssim);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%.6f,%.6f\n", mean_psnr(), mean_ssim());
    out << buf;
    return out.str();
  }

  void save_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    ensure(f.good(), "metrics: cannot write '" + path + "'");
    f << to_csv();
  }
};

}  // namespace nfsim
