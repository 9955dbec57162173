#pragma once

#include "cacl/core.hpp"
#include "cacl/segmentation.hpp"

#include <cmath>

namespace cacl {

/// Stain optical-density vectors, one unit-norm row per stain
/// (hematoxylin, DAB, residual).
template <class S>
struct StainMatrix {
  Eigen::Matrix<S, 3, 3> rows_od;

  /// Published H-DAB vectors; the residual is the normalized cross product.
  static StainMatrix hdab() {
    StainMatrix m;
    Eigen::Matrix<S, 3, 1> h, d;
    h << S(0.650), S(0.704), S(0.286);
    d << S(0.268), S(0.570), S(0.776);
    h.normalize();
    d.normalize();
    Eigen::Matrix<S, 3, 1> r = h.cross(d).normalized();
    m.rows_od.row(0) = h.transpose();
    m.rows_od.row(1) = d.transpose();
    m.rows_od.row(2) = r.transpose();
    return m;
  }
};

inline constexpr double kOdClamp = 1.0 / 255.0;

/// Optical density: pixels clamped to [1/255, 1], then -log10. White maps to
/// zero OD.
template <class S>
Grid<S> rgb_to_od(const Grid<S>& image) {
  Grid<S> od(image.channels(), image.h, image.w);
  od.m = (-(image.m.array().max(S(kOdClamp)).min(S(1))).log10()).matrix();
  return od;
}

template <class S>
Grid<S> od_to_rgb(const Grid<S>& od) {
  Grid<S> rgb(od.channels(), od.h, od.w);
  rgb.m = Eigen::pow(S(10), -od.m.array()).matrix();
  return rgb;
}

/// Per-pixel solve of od = concentrations * stains (row convention), clamped
/// at zero from below. Throws when the stain matrix is not invertible.
template <class S>
Grid<S> deconvolve(const Grid<S>& od, const StainMatrix<S>& stains) {
  if (od.channels() != 3) throw ShapeError("deconvolve: expected 3 OD channels");
  const S det = stains.rows_od.determinant();
  if (std::abs(double(det)) < 1e-8)
    throw std::invalid_argument("deconvolve: stain matrix is singular");
  const Eigen::Matrix<S, 3, 3> inv = stains.rows_od.transpose().inverse();
  Grid<S> conc(3, od.h, od.w);
  conc.m = (inv * od.m).cwiseMax(S(0));
  return conc;
}

/// Mask of pixels whose concentration strictly exceeds the threshold.
template <class S>
SegmentationMask threshold_dab(const ArrXX<S>& concentration, S threshold) {
  SegmentationMask mask;
  mask.source = MaskSource::Baseline;
  mask.pixels = (concentration > threshold).template cast<std::uint8_t>();
  return mask;
}

/// Channel c of a grid as an h x w plane.
template <class S>
ArrXX<S> channel_plane(const Grid<S>& g, int c) {
  ArrXX<S> plane(g.h, g.w);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) plane(y, x) = g.at(c, y, x);
  return plane;
}

/// Full color-deconvolution pipeline: OD transform, unmixing, DAB threshold.
template <class S>
SegmentationMask colordeconv_segment(const Grid<S>& image, const StainMatrix<S>& stains,
                                     S threshold, std::string provenance = {}) {
  const Grid<S> conc = deconvolve(rgb_to_od(image), stains);
  SegmentationMask mask = threshold_dab<S>(channel_plane(conc, 1), threshold);
  mask.provenance = std::move(provenance);
  return mask;
}

/// DAB concentration plane, for the soft-probability BCE variant.
template <class S>
ArrXX<S> dab_concentration(const Grid<S>& image, const StainMatrix<S>& stains) {
  return channel_plane(deconvolve(rgb_to_od(image), stains), 1);
}

}  // namespace cacl
