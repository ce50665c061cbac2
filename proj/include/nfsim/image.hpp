// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Planar image buffers plus binary PPM/PGM readers and writers. Depth maps
// use 16-bit PGM in millimeters (big-endian sample words per the netpbm
// convention); label maps use 8-bit PGM.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nfsim/core.hpp"

namespace nfsim {

template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> data;  // row-major, interleaved channels

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c), data(size_t(w) * h * c, T{}) {}

  T& at(int x, int y, int c = 0) { return data[(size_t(y) * width + x) * channels + c]; }
  T at(int x, int y, int c = 0) const { return data[(size_t(y) * width + x) * channels + c]; }
  int64_t pixels() const { return int64_t(width) * height; }
};

using ImageF = Image<double>;   // [0,1] rgb or scalar
using ImageU8 = Image<uint8_t>;
using ImageU16 = Image<uint16_t>;

inline uint8_t to_u8(double v) {
  return uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace pnm {

inline void skip_space_and_comments(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline void write_ppm(const std::string& path, const ImageF& img) {
  require(img.channels == 3, "write_ppm: 3-channel image required");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  ensure(f.good(), "write_ppm: cannot open '" + path + "'");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(size_t(img.width) * 3);
  for (int y = 0; y < img.height; y++) {
    for (int x = 0; x < img.width; x++)
      for (int c = 0; c < 3; c++) row[size_t(x) * 3 + c] = to_u8(img.at(x, y, c));
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  ensure(f.good(), "write_ppm: write failed for '" + path + "'");
}

inline ImageF read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  ensure(f.good(), "read_ppm: cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  ensure(magic == "P6", "read_ppm: '" + path + "' is not binary PPM");
  skip_space_and_comments(f);
  int w, h, maxval;
  f >> w;
  skip_space_and_comments(f);
  f >> h;
  skip_space_and_comments(f);
  f >> maxval;
  ensure(maxval == 255, "read_ppm: only 8-bit supported");
  f.get();  // single whitespace after header
  ImageF img(w, h, 3);
  std::vector<uint8_t> raw(size_t(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  ensure(f.gcount() == std::streamsize(raw.size()), "read_ppm: truncated '" + path + "'");
  for (size_t i = 0; i < raw.size(); i++) img.data[i] = raw[i] / 255.0;
  return img;
}

// 8-bit label map
inline void write_pgm8(const std::string& path, const ImageU8& img) {
  require(img.channels == 1, "write_pgm8: single channel required");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  ensure(f.good(), "write_pgm8: cannot open '" + path + "'");
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()), std::streamsize(img.data.size()));
  ensure(f.good(), "write_pgm8: write failed");
}

inline ImageU8 read_pgm8(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  ensure(f.good(), "read_pgm8: cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  ensure(magic == "P5", "read_pgm8: '" + path + "' is not binary PGM");
  skip_space_and_comments(f);
  int w, h, maxval;
  f >> w;
  skip_space_and_comments(f);
  f >> h;
  skip_space_and_comments(f);
  f >> maxval;
  ensure(maxval == 255, "read_pgm8: expected 8-bit file");
  f.get();
  ImageU8 img(w, h, 1);
  f.read(reinterpret_cast<char*>(img.data.data()), std::streamsize(img.data.size()));
  ensure(f.gcount() == std::streamsize(img.data.size()), "read_pgm8: truncated '" + path + "'");
  return img;
}

// 16-bit depth map, sample words big-endian, values in millimeters
inline void write_depth_pgm(const std::string& path, const ImageF& depth_m) {
  require(depth_m.channels == 1, "write_depth_pgm: single channel required");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  ensure(f.good(), "write_depth_pgm: cannot open '" + path + "'");
  f << "P5\n# scale millimeters\n" << depth_m.width << " " << depth_m.height << "\n65535\n";
  std::vector<uint8_t> row(size_t(depth_m.width) * 2);
  for (int y = 0; y < depth_m.height; y++) {
    for (int x = 0; x < depth_m.width; x++) {
      double mm = depth_m.at(x, y) * 1000.0;
      uint16_t q = uint16_t(std::lround(std::clamp(mm, 0.0, 65535.0)));
      row[size_t(x) * 2] = uint8_t(q >> 8);
      row[size_t(x) * 2 + 1] = uint8_t(q & 0xff);
    }
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  ensure(f.good(), "write_depth_pgm: write failed");
}

inline ImageF read_depth_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  ensure(f.good(), "read_depth_pgm: cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  ensure(magic == "P5", "read_depth_pgm: '" + path + "' is not binary PGM");
  skip_space_and_comments(f);
  int w, h, maxval;
  f >> w;
  skip_space_and_comments(f);
  f >> h;
  skip_space_and_comments(f);
  f >> maxval;
  ensure(maxval == 65535, "read_depth_pgm: expected 16-bit file");
  f.get();
  ImageF img(w, h, 1);
  std::vector<uint8_t> raw(size_t(w) * h * 2);
  f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  ensure(f.gcount() == std::streamsize(raw.size()), "read_depth_pgm: truncated '" + path + "'");
  for (int64_t i = 0; i < img.pixels(); i++) {
    uint16_t q = uint16_t((raw[i * 2] << 8) | raw[i * 2 + 1]);
    img.data[i] = q / 1000.0;  // meters
  }
  return img;
}

}  // namespace pnm

// mean squared error over all samples; images must match in shape
inline double image_mse(const ImageF& a, const ImageF& b) {
  require(a.width == b.width && a.height == b.height && a.channels == b.channels,
          "image_mse: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); i++) {
    double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / double(a.data.size());
}

}  // namespace nfsim
