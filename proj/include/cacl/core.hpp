#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cacl {

template <class S> using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S> using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S> using ArrXX = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Binary raster, h rows by w cols, values restricted to {0, 1}.
using MaskGrid = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Shape violations get their own type so callers can tell them apart from
/// ordinary bad arguments.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class Label { Positive, Negative };
enum class Split { Train, Val, Test };

inline const char* to_string(Label l) { return l == Label::Positive ? "positive" : "negative"; }
inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

/// Channel-major raster: column j holds the channel values of pixel
/// (y = j / w, x = j % w). Images use 3 channels in [0,1]; feature grids use
/// `dim` channels. Keeping pixels as columns makes convolution an Eigen GEMM.
template <class S>
struct Grid {
  MatX<S> m;
  int h = 0;
  int w = 0;

  Grid() = default;
  Grid(int channels, int h_, int w_) : m(MatX<S>::Zero(channels, h_ * w_)), h(h_), w(w_) {}

  int channels() const { return static_cast<int>(m.rows()); }
  int pixels() const { return h * w; }

  S& at(int c, int y, int x) { return m(c, y * w + x); }
  S at(int c, int y, int x) const { return m(c, y * w + x); }

  auto pixel(int y, int x) { return m.col(y * w + x); }
  auto pixel(int y, int x) const { return m.col(y * w + x); }

  bool same_shape(const Grid& o) const { return h == o.h && w == o.w && m.rows() == o.m.rows(); }
};

template <class S>
Grid<S> flip_horizontal(const Grid<S>& g) {
  Grid<S> out(g.channels(), g.h, g.w);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) out.pixel(y, x) = g.pixel(y, g.w - 1 - x);
  return out;
}

template <class S>
Grid<S> flip_vertical(const Grid<S>& g) {
  Grid<S> out(g.channels(), g.h, g.w);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) out.pixel(y, x) = g.pixel(g.h - 1 - y, x);
  return out;
}

/// Uniform draw in [lo, hi). Thin wrapper so every module draws through the
/// same distribution object semantics.
template <class S>
S uniform(std::mt19937_64& rng, S lo, S hi) {
  std::uniform_real_distribution<S> d(lo, hi);
  return d(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi_inclusive) {
  std::uniform_int_distribution<int> d(lo, hi_inclusive);
  return d(rng);
}

}  // namespace cacl
