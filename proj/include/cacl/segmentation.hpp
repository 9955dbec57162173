#pragma once

#include "cacl/autoencoder.hpp"
#include "cacl/codebook.hpp"
#include "cacl/core.hpp"

#include <string>

namespace cacl {

enum class MaskSource { Cacl, Baseline };

struct SegmentationMask {
  MaskGrid pixels;  // h x w, values {0,1}
  MaskSource source = MaskSource::Cacl;
  std::string provenance;
};

/// Nearest-neighbor block expansion of a boolean usage grid to pixel
/// resolution: each feature cell becomes an f x f block.
inline SegmentationMask extract_mask(const MaskGrid& usage, int target_h, int target_w) {
  const int uh = static_cast<int>(usage.rows()), uw = static_cast<int>(usage.cols());
  if (uh < 1 || uw < 1) throw ShapeError("extract_mask: empty usage grid");
  if (target_h % uh != 0 || target_w % uw != 0 || target_h / uh != target_w / uw)
    throw ShapeError("extract_mask: target dims must be the same integer multiple of usage dims");
  const int f = target_h / uh;
  SegmentationMask mask;
  mask.pixels = MaskGrid::Zero(target_h, target_w);
  for (int y = 0; y < uh; ++y)
    for (int x = 0; x < uw; ++x)
      if (usage(y, x))
        mask.pixels.block(y * f, x * f, f, f).setConstant(1);
  return mask;
}

/// Any-true pooling by factor f; the exact inverse of extract_mask.
inline MaskGrid downsample_any(const MaskGrid& mask, int f) {
  const int uh = static_cast<int>(mask.rows()) / f, uw = static_cast<int>(mask.cols()) / f;
  MaskGrid usage = MaskGrid::Zero(uh, uw);
  for (int y = 0; y < uh; ++y)
    for (int x = 0; x < uw; ++x)
      usage(y, x) = mask.block(y * f, x * f, f, f).maxCoeff();
  return usage;
}

/// Binary dilation with the discrete Euclidean disk dy^2 + dx^2 <= r^2
/// (radius 1 is the 4-connected cross); radius 0 is the identity.
inline SegmentationMask dilate(const SegmentationMask& mask, int radius) {
  if (radius < 0) throw std::invalid_argument("dilate: radius must be >= 0");
  if (radius == 0) return mask;
  const int h = static_cast<int>(mask.pixels.rows()), w = static_cast<int>(mask.pixels.cols());
  SegmentationMask out = mask;
  out.pixels = MaskGrid::Zero(h, w);
  std::vector<std::pair<int, int>> disk;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= radius * radius) disk.emplace_back(dy, dx);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask.pixels(y, x)) continue;
      for (auto [dy, dx] : disk) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < h && xx >= 0 && xx < w) out.pixels(yy, xx) = 1;
      }
    }
  return out;
}

/// encode -> quantize over S+C -> class-partition usage -> block-expand ->
/// optional dilation. Pure inference given trained weights.
template <class S>
SegmentationMask segment_image(const AutoencoderParams<S>& params,
                               const CodebookPartitioned<S>& codebook, const Grid<S>& image,
                               int dilation_radius, std::string provenance = {}) {
  Grid<S> features = encode(image, params);
  QuantizationResult<S> q = quantize(features, codebook, CodeSubset::SharedAndClass);
  SegmentationMask mask = extract_mask(usage_grid(q), image.h, image.w);
  mask.source = MaskSource::Cacl;
  mask.provenance = std::move(provenance);
  if (dilation_radius > 0) mask = dilate(mask, dilation_radius);
  return mask;
}

}  // namespace cacl
