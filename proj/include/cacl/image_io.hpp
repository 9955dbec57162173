#pragma once

#include "cacl/core.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cacl {

/// Decoded 8-bit raster, row-major, channels interleaved (1 = gray, 3 = RGB).
struct PngImage {
  int w = 0;
  int h = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;
};

PngImage read_png(const std::filesystem::path& path);

/// Writes via a temp file in the same directory followed by a rename, so an
/// interrupted run never leaves a truncated image behind.
void write_png(const std::filesystem::path& path, const PngImage& img);

template <class S>
Grid<S> to_grid(const PngImage& img) {
  Grid<S> g(img.channels, img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < img.channels; ++c)
        g.at(c, y, x) = S(img.data[std::size_t((y * img.w + x) * img.channels + c)]) / S(255);
  return g;
}

template <class S>
PngImage to_png_rgb(const Grid<S>& g) {
  PngImage img;
  img.w = g.w;
  img.h = g.h;
  img.channels = g.channels();
  img.data.resize(std::size_t(g.pixels()) * std::size_t(img.channels));
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x)
      for (int c = 0; c < img.channels; ++c) {
        S v = std::clamp(g.at(c, y, x), S(0), S(1));
        img.data[std::size_t((y * g.w + x) * img.channels + c)] =
            static_cast<std::uint8_t>(std::lround(double(v) * 255.0));
      }
  return img;
}

/// Mask values {0,1} become {0,255} gray pixels.
inline PngImage to_png_gray(const MaskGrid& mask) {
  PngImage img;
  img.h = static_cast<int>(mask.rows());
  img.w = static_cast<int>(mask.cols());
  img.channels = 1;
  img.data.resize(std::size_t(img.w) * std::size_t(img.h));
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      img.data[std::size_t(y * img.w + x)] = mask(y, x) ? 255 : 0;
  return img;
}

inline MaskGrid mask_from_png(const PngImage& img) {
  MaskGrid m(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      m(y, x) = img.data[std::size_t((y * img.w + x) * img.channels)] >= 128 ? 1 : 0;
  return m;
}

}  // namespace cacl
