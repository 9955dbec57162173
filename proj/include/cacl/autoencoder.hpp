#pragma once

#include "cacl/codebook.hpp"
#include "cacl/core.hpp"
#include "cacl/nn.hpp"

#include <tuple>
#include <vector>

namespace cacl {

template <class S>
struct LabeledPatch {
  Grid<S> pixels;  // 3 x (h*w), values in [0,1]
  Label label = Label::Negative;
};

template <class S>
struct ReconstructionPair {
  Grid<S> recon_positive;  // decoded from the S+C quantization
  Grid<S> recon_negative;  // decoded from the S-only quantization
};

// x + conv1x1(relu(conv3x3(relu(x))))
template <class S>
struct ResBlock {
  nn::Conv<S> c3, c1;

  void init(int width, std::mt19937_64& rng) {
    c3.init(width, width, 3, 1, 1, rng);
    c1.init(width, width, 1, 1, 0, rng);
  }
};

template <class S>
struct ResCache {
  Grid<S> r0, h1, r1;
};

template <class S>
Grid<S> resblock_forward(const ResBlock<S>& rb, const Grid<S>& x, ResCache<S>* cache) {
  Grid<S> r0 = nn::relu(x);
  Grid<S> h1 = nn::conv_forward(rb.c3, r0);
  Grid<S> r1 = nn::relu(h1);
  Grid<S> out = nn::conv_forward(rb.c1, r1);
  out.m += x.m;
  if (cache) {
    cache->r0 = std::move(r0);
    cache->h1 = std::move(h1);
    cache->r1 = std::move(r1);
  }
  return out;
}

template <class S>
Grid<S> resblock_backward(const ResBlock<S>& rb, const ResCache<S>& cache, const Grid<S>& gy,
                          ResBlock<S>* grad) {
  Grid<S> g_r1 = nn::conv_backward(rb.c1, cache.r1, gy, grad ? &grad->c1 : nullptr);
  Grid<S> g_h1 = nn::relu_backward(cache.r1, g_r1);
  Grid<S> g_r0 = nn::conv_backward(rb.c3, cache.r0, g_h1, grad ? &grad->c3 : nullptr);
  Grid<S> gx = nn::relu_backward(cache.r0, g_r0);
  gx.m += gy.m;
  return gx;
}

/// Encoder E and decoder D. Two stride-2 convolutions give a fixed spatial
/// downsampling factor of 4; two residual blocks refine the grid; a 1x1
/// projection sets the embedding width. The decoder mirrors the stack with
/// transposed convolutions and ends in a sigmoid so outputs live in (0,1).
template <class S>
struct AutoencoderParams {
  int downsample_factor = 4;
  int dim = 64;
  int hidden = 64;

  nn::Conv<S> enc1, enc2, to_embed;
  ResBlock<S> enc_r1, enc_r2;
  nn::Conv<S> from_embed;
  ResBlock<S> dec_r1, dec_r2;
  nn::Deconv<S> dec1, dec2;

  static AutoencoderParams init(int dim, int hidden, std::uint64_t seed) {
    AutoencoderParams p;
    p.dim = dim;
    p.hidden = hidden;
    std::mt19937_64 rng(seed);
    p.enc1.init(3, hidden, 4, 2, 1, rng);
    p.enc2.init(hidden, hidden, 4, 2, 1, rng);
    p.enc_r1.init(hidden, rng);
    p.enc_r2.init(hidden, rng);
    p.to_embed.init(hidden, dim, 1, 1, 0, rng);
    p.from_embed.init(dim, hidden, 3, 1, 1, rng);
    p.dec_r1.init(hidden, rng);
    p.dec_r2.init(hidden, rng);
    p.dec1.init(hidden, hidden, 4, 2, 1, rng);
    p.dec2.init(hidden, 3, 4, 2, 1, rng);
    return p;
  }

  std::vector<MatX<S>*> tensors() {
    return {&enc1.W,       &enc1.b,      &enc2.W,      &enc2.b,      &enc_r1.c3.W, &enc_r1.c3.b,
            &enc_r1.c1.W,  &enc_r1.c1.b, &enc_r2.c3.W, &enc_r2.c3.b, &enc_r2.c1.W, &enc_r2.c1.b,
            &to_embed.W,   &to_embed.b,  &from_embed.W, &from_embed.b, &dec_r1.c3.W, &dec_r1.c3.b,
            &dec_r1.c1.W,  &dec_r1.c1.b, &dec_r2.c3.W, &dec_r2.c3.b, &dec_r2.c1.W, &dec_r2.c1.b,
            &dec1.W,       &dec1.b,      &dec2.W,      &dec2.b};
  }
  std::vector<const MatX<S>*> tensors() const {
    auto v = const_cast<AutoencoderParams*>(this)->tensors();
    return {v.begin(), v.end()};
  }
};

template <class S>
AutoencoderParams<S> zeros_like(const AutoencoderParams<S>& p) {
  AutoencoderParams<S> z = p;
  for (auto* t : z.tensors()) t->setZero();
  return z;
}

template <class S>
struct EncoderCache {
  Grid<S> input, h1, h2, t1, t2;
  ResCache<S> r1, r2;
};

template <class S>
struct DecoderCache {
  Grid<S> zq, u0, t1, t2, r_pre, d1, rd1, out;
  ResCache<S> r1, r2;
};

template <class S>
Grid<S> encode(const Grid<S>& image, const AutoencoderParams<S>& p, EncoderCache<S>* cache = nullptr) {
  if (image.h % p.downsample_factor != 0 || image.w % p.downsample_factor != 0)
    throw ShapeError("encode: image dimensions must be multiples of the downsampling factor");
  if (image.channels() != 3) throw ShapeError("encode: expected a 3-channel image");
  Grid<S> h1 = nn::relu(nn::conv_forward(p.enc1, image));
  Grid<S> h2 = nn::relu(nn::conv_forward(p.enc2, h1));
  ResCache<S> rc1, rc2;
  Grid<S> t1 = resblock_forward(p.enc_r1, h2, cache ? &rc1 : nullptr);
  Grid<S> t2 = resblock_forward(p.enc_r2, t1, cache ? &rc2 : nullptr);
  Grid<S> features = nn::conv_forward(p.to_embed, t2);
  if (cache) {
    cache->input = image;
    cache->h1 = std::move(h1);
    cache->h2 = std::move(h2);
    cache->t1 = std::move(t1);
    cache->t2 = std::move(t2);
    cache->r1 = std::move(rc1);
    cache->r2 = std::move(rc2);
  }
  return features;
}

template <class S>
void encoder_backward(const AutoencoderParams<S>& p, const EncoderCache<S>& c,
                      const Grid<S>& g_features, AutoencoderParams<S>* grad) {
  Grid<S> g_t2 = nn::conv_backward(p.to_embed, c.t2, g_features, grad ? &grad->to_embed : nullptr);
  Grid<S> g_t1 = resblock_backward(p.enc_r2, c.r2, g_t2, grad ? &grad->enc_r2 : nullptr);
  Grid<S> g_h2 = resblock_backward(p.enc_r1, c.r1, g_t1, grad ? &grad->enc_r1 : nullptr);
  Grid<S> g_a2 = nn::relu_backward(c.h2, g_h2);
  Grid<S> g_h1 = nn::conv_backward(p.enc2, c.h1, g_a2, grad ? &grad->enc2 : nullptr);
  Grid<S> g_a1 = nn::relu_backward(c.h1, g_h1);
  nn::conv_backward(p.enc1, c.input, g_a1, grad ? &grad->enc1 : nullptr);
}

template <class S>
Grid<S> decode(const Grid<S>& zq, const AutoencoderParams<S>& p, DecoderCache<S>* cache = nullptr) {
  if (zq.channels() != p.dim) throw ShapeError("decode: embedding width mismatch");
  Grid<S> u0 = nn::conv_forward(p.from_embed, zq);
  ResCache<S> rc1, rc2;
  Grid<S> t1 = resblock_forward(p.dec_r1, u0, cache ? &rc1 : nullptr);
  Grid<S> t2 = resblock_forward(p.dec_r2, t1, cache ? &rc2 : nullptr);
  Grid<S> r_pre = nn::relu(t2);
  Grid<S> d1 = nn::deconv_forward(p.dec1, r_pre);
  Grid<S> rd1 = nn::relu(d1);
  Grid<S> d2 = nn::deconv_forward(p.dec2, rd1);
  Grid<S> out = nn::sigmoid(d2);
  if (cache) {
    cache->zq = zq;
    cache->u0 = std::move(u0);
    cache->t1 = std::move(t1);
    cache->t2 = std::move(t2);
    cache->r_pre = std::move(r_pre);
    cache->d1 = std::move(d1);
    cache->rd1 = std::move(rd1);
    cache->out = out;
    cache->r1 = std::move(rc1);
    cache->r2 = std::move(rc2);
  }
  return out;
}

template <class S>
Grid<S> decoder_backward(const AutoencoderParams<S>& p, const DecoderCache<S>& c,
                         const Grid<S>& g_out, AutoencoderParams<S>* grad) {
  Grid<S> g_d2 = nn::sigmoid_backward(c.out, g_out);
  Grid<S> g_rd1 = nn::deconv_backward(p.dec2, c.rd1, g_d2, grad ? &grad->dec2 : nullptr);
  Grid<S> g_d1 = nn::relu_backward(c.rd1, g_rd1);
  Grid<S> g_rpre = nn::deconv_backward(p.dec1, c.r_pre, g_d1, grad ? &grad->dec1 : nullptr);
  Grid<S> g_t2 = nn::relu_backward(c.r_pre, g_rpre);
  Grid<S> g_t1 = resblock_backward(p.dec_r2, c.r2, g_t2, grad ? &grad->dec_r2 : nullptr);
  Grid<S> g_u0 = resblock_backward(p.dec_r1, c.r1, g_t1, grad ? &grad->dec_r1 : nullptr);
  return nn::conv_backward(p.from_embed, c.zq, g_u0, grad ? &grad->from_embed : nullptr);
}

template <class S>
struct DualCache {
  EncoderCache<S> enc;
  Grid<S> features;
  DecoderCache<S> dec_pos, dec_neg;
};

/// Encode once, quantize twice (S+C and S-only), decode both with the same
/// decoder weights.
template <class S>
std::tuple<ReconstructionPair<S>, QuantizationResult<S>, QuantizationResult<S>> forward_dual(
    const LabeledPatch<S>& patch, const AutoencoderParams<S>& p,
    const CodebookPartitioned<S>& codebook, DualCache<S>* cache = nullptr) {
  Grid<S> features = encode(patch.pixels, p, cache ? &cache->enc : nullptr);
  QuantizationResult<S> qp = quantize(features, codebook, CodeSubset::SharedAndClass);
  QuantizationResult<S> qn = quantize(features, codebook, CodeSubset::SharedOnly);
  ReconstructionPair<S> pair;
  pair.recon_positive = decode(qp.quantized, p, cache ? &cache->dec_pos : nullptr);
  pair.recon_negative = decode(qn.quantized, p, cache ? &cache->dec_neg : nullptr);
  if (cache) cache->features = std::move(features);
  return {std::move(pair), std::move(qp), std::move(qn)};
}

/// Masked reconstruction objective: each patch supervises exactly one decoded
/// path, chosen by its weak label. Mean squared error over all pixel values.
template <class S>
S reconstruction_loss(const LabeledPatch<S>& patch, const ReconstructionPair<S>& pair) {
  const Grid<S>& target =
      patch.label == Label::Negative ? pair.recon_negative : pair.recon_positive;
  if (!patch.pixels.same_shape(target))
    throw ShapeError("reconstruction_loss: reconstruction shape mismatch");
  return (patch.pixels.m - target.m).squaredNorm() / S(patch.pixels.m.size());
}

enum class DivergenceForm { Hinge, Signed };

/// Distance between the two quantized maps on the cells that selected a
/// class code. Negative patches minimize it; positive patches are pushed to
/// keep it at least `margin` apart (the signed form returns -d instead and is
/// unbounded below).
template <class S>
S codebook_divergence_loss(const QuantizationResult<S>& e_neg, const QuantizationResult<S>& e_pos,
                           Label label, S margin, DivergenceForm form = DivergenceForm::Hinge) {
  if (margin < S(0)) throw std::invalid_argument("codebook_divergence_loss: margin must be >= 0");
  if (!e_neg.quantized.same_shape(e_pos.quantized))
    throw ShapeError("codebook_divergence_loss: quantized shapes differ");
  const int cells = e_pos.quantized.pixels();
  S acc = S(0);
  int n_class = 0;
  for (int j = 0; j < cells; ++j) {
    if (!e_pos.from_class_partition[j]) continue;
    acc += (e_neg.quantized.m.col(j) - e_pos.quantized.m.col(j)).squaredNorm();
    ++n_class;
  }
  if (n_class == 0) return S(0);
  const S d = acc / S(n_class);
  if (label == Label::Negative) return d;
  return form == DivergenceForm::Hinge ? std::max(S(0), margin - d) : -d;
}

}  // namespace cacl
