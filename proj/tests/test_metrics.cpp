// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
#include "nfsim/metrics.hpp"

#include <gtest/gtest.h>

using namespace nfsim;

namespace {

ImageF solid(int w, int h, double r, double g, double b) {
  ImageF img(w, h, 3);
  for (int y = 0; y < h; y++)
    for (int x = 0; x < w; x++) {
      img.at(x, y, 0) = r;
      img.at(x, y, 1) = g;
      img.at(x, y, 2) = b;
    }
  return img;
}

ImageF noisy(const ImageF& base, double amp, uint64_t seed) {
  ImageF out = base;
  Rng rng(seed);
  for (auto& v : out.data) v = std::clamp(v + amp * (2 * rng.uniform() - 1), 0.0, 1.0);
  return out;
}

ImageF test_pattern(int w, int h, uint64_t seed) {
  ImageF img(w, h, 3);
  Rng rng(seed);
  for (int y = 0; y < h; y++)
    for (int x = 0; x < w; x++)
      for (int c = 0; c < 3; c++)
        img.at(x, y, c) = 0.5 + 0.3 * std::sin(0.3 * x + 0.2 * y + c) + 0.1 * rng.uniform();
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace

TEST(Psnr, IdenticalImagesHitTheCap) {
  ImageF a = test_pattern(32, 24, 1);
  EXPECT_DOUBLE_EQ(psnr(a, a), 99.0);
}

TEST(Psnr, KnownMseGivesTwentyDb) {
  ImageF a = solid(16, 16, 0.5, 0.5, 0.5);
  ImageF b = solid(16, 16, 0.6, 0.6, 0.6);  // MSE = 0.01
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Psnr, MidGrayVersusBlack) {
  ImageF a = solid(16, 16, 0.5, 0.5, 0.5);
  ImageF b = solid(16, 16, 0.0, 0.0, 0.0);
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(1.0 / 0.25), 1e-9);  // ~6.02 dB
}

TEST(Psnr, SymmetricAndShapeChecked) {
  ImageF a = test_pattern(20, 20, 2);
  ImageF b = test_pattern(20, 20, 3);
  EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
  ImageF c(10, 20, 3);
  EXPECT_THROW(psnr(a, c), std::invalid_argument);
}

TEST(Psnr, StrictlyDecreasesWithNoiseAmplitude) {
  ImageF base = test_pattern(48, 36, 7);
  double p1 = psnr(base, noisy(base, 0.01, 9));
  double p2 = psnr(base, noisy(base, 0.02, 9));
  double p5 = psnr(base, noisy(base, 0.05, 9));
  EXPECT_GT(p1, p2);
  EXPECT_GT(p2, p5);
}

TEST(Ssim, IdenticalImagesGiveOne) {
  ImageF a = test_pattern(32, 24, 4);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, NegativeImageScoresBelowOne) {
  ImageF a = test_pattern(32, 24, 5);
  ImageF inv = a;
  for (auto& v : inv.data) v = 1.0 - v;
  EXPECT_LT(ssim(a, inv), 0.5);
}

TEST(Ssim, ConstantImagesStabilizedToOne) {
  ImageF a = solid(16, 16, 0.42, 0.42, 0.42);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, SymmetricAndWindowChecked) {
  ImageF a = test_pattern(24, 24, 6);
  ImageF b = noisy(a, 0.05, 8);
  EXPECT_DOUBLE_EQ(ssim(a, b), ssim(b, a));
  ImageF tiny = solid(8, 8, 0.5, 0.5, 0.5);
  EXPECT_THROW(ssim(tiny, tiny), std::invalid_argument);
}

TEST(Report, CsvSchemaWithSummaryRow) {
  MetricReport r;
  r.split_name = "holdout-75";
  r.rows = {{3, 25.5, 0.91}, {7, 24.0, 0.88}};
  std::string csv = r.to_csv();
  EXPECT_NE(csv.find("frame_id,psnr_db,ssim"), std::string::npos);
  EXPECT_NE(csv.find("3,25.5"), std::string::npos);
  EXPECT_NE(csv.find("mean,24.75"), std::string::npos);
  EXPECT_NE(csv.find("lpips: n/a"), std::string::npos);
  EXPECT_NEAR(r.mean_psnr(), 24.75, 1e-12);
}
