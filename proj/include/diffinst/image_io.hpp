#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "diffinst/common.hpp"
#include "diffinst/tensor.hpp"

namespace diffinst {

// Images are 3 x H x W float tensors holding k/255 values, so the 8-bit
// raster round-trips bit-exactly.

inline uint8_t quantize_255(float v) {
  float q = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f);
  return static_cast<uint8_t>(q);
}

inline TensorF quantize_image(const TensorF& img) {
  TensorF out(img.shape);
  for (int64_t i = 0; i < img.numel(); ++i)
    out[i] = static_cast<float>(quantize_255(img[i])) / 255.0f;
  return out;
}

inline void write_ppm(const std::string& path, const TensorF& img) {
  check(img.ndim() == 3 && img.dim(0) == 3, "write_ppm: image must be 3xHxW");
  int h = img.dim(1), w = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) row[x * 3 + c] = quantize_255(img.at(c, y, x));
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!f) throw std::runtime_error("write_ppm: short write to " + path);
}

inline TensorF read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported or corrupt header in " + path);
  f.get();  // single whitespace after header
  std::vector<uint8_t> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (static_cast<size_t>(f.gcount()) != buf.size())
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  TensorF img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(buf[(y * w + x) * 3 + c]) / 255.0f;
  return img;
}

}  // namespace diffinst
