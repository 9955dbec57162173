#pragma once

#include "cacl/core.hpp"

#include <cmath>
#include <vector>

// Minimal convolution stack. Grids keep pixels as columns, so conv forward is
// one GEMM over an im2col gather and every backward is the matching adjoint.
// Layers are plain parameter structs; callers retain the forward activations
// they need for the backward pass.
namespace cacl::nn {

inline int conv_out(int n, int k, int stride, int pad) { return (n + 2 * pad - k) / stride + 1; }
inline int deconv_out(int n, int k, int stride, int pad) { return (n - 1) * stride - 2 * pad + k; }

// Patch gather. Row layout: (ky*k + kx)*ch + c, so each kernel offset owns a
// contiguous channel block and the copies vectorize.
template <class S>
MatX<S> im2col(const Grid<S>& x, int k, int stride, int pad) {
  const int ch = x.channels();
  const int oh = conv_out(x.h, k, stride, pad), ow = conv_out(x.w, k, stride, pad);
  MatX<S> cols = MatX<S>::Zero(ch * k * k, oh * ow);
  for (int ky = 0; ky < k; ++ky) {
    for (int kx = 0; kx < k; ++kx) {
      const int base = (ky * k + kx) * ch;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= x.h) continue;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= x.w) continue;
          cols.col(oy * ow + ox).segment(base, ch) = x.m.col(iy * x.w + ix);
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatter-add columns back onto a ch x (h*w) raster.
template <class S>
Grid<S> col2im(const MatX<S>& cols, int ch, int h, int w, int k, int stride, int pad) {
  Grid<S> out(ch, h, w);
  const int oh = conv_out(h, k, stride, pad), ow = conv_out(w, k, stride, pad);
  for (int ky = 0; ky < k; ++ky) {
    for (int kx = 0; kx < k; ++kx) {
      const int base = (ky * k + kx) * ch;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          out.m.col(iy * w + ix) += cols.col(oy * ow + ox).segment(base, ch);
        }
      }
    }
  }
  return out;
}

template <class S>
struct Conv {
  int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
  MatX<S> W;  // out_ch x (in_ch*k*k)
  MatX<S> b;  // out_ch x 1

  void init(int in, int out, int k_, int stride_, int pad_, std::mt19937_64& rng) {
    in_ch = in;
    out_ch = out;
    k = k_;
    stride = stride_;
    pad = pad_;
    W.resize(out, in * k_ * k_);
    b = MatX<S>::Zero(out, 1);
    const S bound = S(std::sqrt(6.0 / double(in * k_ * k_)));
    for (int i = 0; i < W.size(); ++i) W.data()[i] = uniform<S>(rng, -bound, bound);
  }

  void zero_like(const Conv& o) {
    *this = o;
    W.setZero();
    b.setZero();
  }
};

template <class S>
Grid<S> conv_forward(const Conv<S>& c, const Grid<S>& x) {
  Grid<S> y(c.out_ch, conv_out(x.h, c.k, c.stride, c.pad), conv_out(x.w, c.k, c.stride, c.pad));
  y.m.noalias() = c.W * im2col(x, c.k, c.stride, c.pad);
  y.m.colwise() += VecX<S>(c.b.col(0));
  return y;
}

// Returns grad wrt the input; accumulates parameter grads into *grad when
// given (mapping-style passes leave it null so only input grads flow).
template <class S>
Grid<S> conv_backward(const Conv<S>& c, const Grid<S>& x, const Grid<S>& gy, Conv<S>* grad) {
  if (grad) {
    grad->W.noalias() += gy.m * im2col(x, c.k, c.stride, c.pad).transpose();
    grad->b.col(0).noalias() += gy.m.rowwise().sum();
  }
  MatX<S> gcols = c.W.transpose() * gy.m;
  return col2im(gcols, c.in_ch, x.h, x.w, c.k, c.stride, c.pad);
}

// Transposed convolution: the forward is the adjoint of a stride-s conv over
// the output raster, so im2col/col2im swap roles relative to Conv.
template <class S>
struct Deconv {
  int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
  MatX<S> W;  // in_ch x (out_ch*k*k)
  MatX<S> b;  // out_ch x 1

  void init(int in, int out, int k_, int stride_, int pad_, std::mt19937_64& rng) {
    in_ch = in;
    out_ch = out;
    k = k_;
    stride = stride_;
    pad = pad_;
    W.resize(in, out * k_ * k_);
    b = MatX<S>::Zero(out, 1);
    const S bound = S(std::sqrt(6.0 / double(in * k_ * k_)));
    for (int i = 0; i < W.size(); ++i) W.data()[i] = uniform<S>(rng, -bound, bound);
  }
};

template <class S>
Grid<S> deconv_forward(const Deconv<S>& d, const Grid<S>& x) {
  const int H = deconv_out(x.h, d.k, d.stride, d.pad), W_ = deconv_out(x.w, d.k, d.stride, d.pad);
  MatX<S> cols = d.W.transpose() * x.m;  // (out_ch*k*k) x (x.h*x.w)
  Grid<S> y = col2im(cols, d.out_ch, H, W_, d.k, d.stride, d.pad);
  y.m.colwise() += VecX<S>(d.b.col(0));
  return y;
}

template <class S>
Grid<S> deconv_backward(const Deconv<S>& d, const Grid<S>& x, const Grid<S>& gy, Deconv<S>* grad) {
  MatX<S> gcols = im2col(gy, d.k, d.stride, d.pad);  // (out_ch*k*k) x (x.h*x.w)
  if (grad) {
    grad->W.noalias() += x.m * gcols.transpose();
    grad->b.col(0).noalias() += gy.m.rowwise().sum();
  }
  Grid<S> gx(d.in_ch, x.h, x.w);
  gx.m.noalias() = d.W * gcols;
  return gx;
}

template <class S>
Grid<S> relu(const Grid<S>& x) {
  Grid<S> y = x;
  y.m = y.m.cwiseMax(S(0));
  return y;
}

// Backward keyed on the forward output: the derivative at exactly 0 is taken
// as 0 either way.
template <class S>
Grid<S> relu_backward(const Grid<S>& y, const Grid<S>& gy) {
  Grid<S> gx = gy;
  gx.m = (y.m.array() > S(0)).template cast<S>() * gy.m.array();
  return gx;
}

template <class S>
Grid<S> sigmoid(const Grid<S>& x) {
  Grid<S> y = x;
  y.m = (S(1) / (S(1) + (-x.m.array()).exp())).matrix();
  return y;
}

template <class S>
Grid<S> sigmoid_backward(const Grid<S>& y, const Grid<S>& gy) {
  Grid<S> gx = gy;
  gx.m = (gy.m.array() * y.m.array() * (S(1) - y.m.array())).matrix();
  return gx;
}

template <class S>
struct Linear {
  MatX<S> W;  // out x in
  MatX<S> b;  // out x 1

  void init(int in, int out, std::mt19937_64& rng) {
    W.resize(out, in);
    b = MatX<S>::Zero(out, 1);
    const S bound = S(std::sqrt(6.0 / double(in)));
    for (int i = 0; i < W.size(); ++i) W.data()[i] = uniform<S>(rng, -bound, bound);
  }
};

template <class S>
VecX<S> linear_forward(const Linear<S>& l, const VecX<S>& x) {
  return l.W * x + l.b.col(0);
}

template <class S>
VecX<S> linear_backward(const Linear<S>& l, const VecX<S>& x, const VecX<S>& gy, Linear<S>* grad) {
  if (grad) {
    grad->W.noalias() += gy * x.transpose();
    grad->b.col(0) += gy;
  }
  return l.W.transpose() * gy;
}

// Global average pool over pixels.
template <class S>
VecX<S> gap_forward(const Grid<S>& x) {
  return x.m.rowwise().mean();
}

template <class S>
Grid<S> gap_backward(const Grid<S>& x, const VecX<S>& gy) {
  Grid<S> gx(x.channels(), x.h, x.w);
  gx.m.colwise() = VecX<S>(gy / S(x.pixels()));
  return gx;
}

}  // namespace cacl::nn
