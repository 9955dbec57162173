#pragma once

#include "cacl/core.hpp"
#include "cacl/nn.hpp"

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

namespace cacl {

/// The four targets of the hybrid discriminator.
enum ClsTarget : int { kRealPositive = 0, kRealNegative = 1, kFakePositive = 2, kFakeNegative = 3 };
inline constexpr int kNumClsTargets = 4;

/// Residual classifier layout. `desk` is the reduced-depth default; the
/// `resnet18` option follows the 2-blocks-per-stage, 64..512 widths layout.
struct ClassifierArch {
  std::vector<int> stage_widths;
  int blocks_per_stage = 1;

  static ClassifierArch desk() { return {{16, 32, 64, 128}, 1}; }
  static ClassifierArch resnet18() { return {{64, 128, 256, 512}, 2}; }

  static ClassifierArch named(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "resnet18") return resnet18();
    throw std::invalid_argument("unknown classifier arch: " + name);
  }
};

// y = relu(x + b(relu(a(x))))
template <class S>
struct ClsResBlock {
  nn::Conv<S> a, b;
  void init(int width, std::mt19937_64& rng) {
    a.init(width, width, 3, 1, 1, rng);
    b.init(width, width, 3, 1, 1, rng);
  }
};

template <class S>
struct ClassifierParams {
  ClassifierArch arch;
  nn::Conv<S> entry;                     // 3 -> stage_widths[0], stride 2
  std::vector<ClsResBlock<S>> blocks;    // stages flattened in order
  std::vector<nn::Conv<S>> downs;        // stride-2 transitions between stages
  nn::Linear<S> head;                    // last width -> 4 logits

  static ClassifierParams init(const ClassifierArch& arch, std::uint64_t seed) {
    ClassifierParams p;
    p.arch = arch;
    std::mt19937_64 rng(seed);
    p.entry.init(3, arch.stage_widths.front(), 4, 2, 1, rng);
    const int n_stages = static_cast<int>(arch.stage_widths.size());
    for (int s = 0; s < n_stages; ++s) {
      for (int b = 0; b < arch.blocks_per_stage; ++b) {
        ClsResBlock<S> blk;
        blk.init(arch.stage_widths[std::size_t(s)], rng);
        p.blocks.push_back(std::move(blk));
      }
      if (s + 1 < n_stages) {
        nn::Conv<S> d;
        d.init(arch.stage_widths[std::size_t(s)], arch.stage_widths[std::size_t(s + 1)], 4, 2, 1, rng);
        p.downs.push_back(std::move(d));
      }
    }
    p.head.init(arch.stage_widths.back(), kNumClsTargets, rng);
    return p;
  }

  std::vector<MatX<S>*> tensors() {
    std::vector<MatX<S>*> v = {&entry.W, &entry.b};
    for (auto& blk : blocks) {
      v.push_back(&blk.a.W);
      v.push_back(&blk.a.b);
      v.push_back(&blk.b.W);
      v.push_back(&blk.b.b);
    }
    for (auto& d : downs) {
      v.push_back(&d.W);
      v.push_back(&d.b);
    }
    v.push_back(&head.W);
    v.push_back(&head.b);
    return v;
  }
};

template <class S>
ClassifierParams<S> zeros_like(const ClassifierParams<S>& p) {
  ClassifierParams<S> z = p;
  for (auto* t : z.tensors()) t->setZero();
  return z;
}

template <class S>
struct ClsBlockCache {
  Grid<S> x, r, y;
};

template <class S>
struct ClassifierCache {
  Grid<S> input, re;
  std::vector<ClsBlockCache<S>> blocks;
  std::vector<Grid<S>> down_in, down_y;
  Grid<S> final_act;
  VecX<S> pooled;
  VecX<S> logits;
};

template <class S>
VecX<S> classifier_forward(const ClassifierParams<S>& p, const Grid<S>& image,
                           ClassifierCache<S>* cache = nullptr) {
  if (image.channels() != 3) throw ShapeError("classifier_forward: expected a 3-channel image");
  Grid<S> cur = nn::relu(nn::conv_forward(p.entry, image));
  if (cache) {
    cache->input = image;
    cache->re = cur;
    cache->blocks.clear();
    cache->down_in.clear();
    cache->down_y.clear();
  }
  const int n_stages = static_cast<int>(p.arch.stage_widths.size());
  int bi = 0;
  for (int s = 0; s < n_stages; ++s) {
    for (int b = 0; b < p.arch.blocks_per_stage; ++b, ++bi) {
      const auto& blk = p.blocks[std::size_t(bi)];
      Grid<S> h = nn::conv_forward(blk.a, cur);
      Grid<S> r = nn::relu(h);
      Grid<S> o = nn::conv_forward(blk.b, r);
      o.m += cur.m;
      Grid<S> y = nn::relu(o);
      if (cache) cache->blocks.push_back({cur, std::move(r), y});
      cur = std::move(y);
    }
    if (s + 1 < n_stages) {
      if (cache) cache->down_in.push_back(cur);
      cur = nn::relu(nn::conv_forward(p.downs[std::size_t(s)], cur));
      if (cache) cache->down_y.push_back(cur);
    }
  }
  VecX<S> pooled = nn::gap_forward(cur);
  VecX<S> logits = nn::linear_forward(p.head, pooled);
  if (cache) {
    cache->final_act = std::move(cur);
    cache->pooled = pooled;
    cache->logits = logits;
  }
  return logits;
}

/// Backward through the classifier. Parameter gradients accumulate into
/// *grad when non-null; with null the pass only transports gradients to the
/// input image (the mapping-loss route, where the classifier acts as a fixed
/// map).
template <class S>
Grid<S> classifier_backward(const ClassifierParams<S>& p, const ClassifierCache<S>& c,
                            const VecX<S>& g_logits,
                            std::type_identity_t<ClassifierParams<S>*> grad) {
  VecX<S> g_pooled = nn::linear_backward(p.head, c.pooled, g_logits, grad ? &grad->head : nullptr);
  Grid<S> g_cur = nn::gap_backward(c.final_act, g_pooled);

  const int n_stages = static_cast<int>(p.arch.stage_widths.size());
  int bi = static_cast<int>(p.blocks.size());
  for (int s = n_stages - 1; s >= 0; --s) {
    if (s + 1 < n_stages) {
      const auto& d = p.downs[std::size_t(s)];
      Grid<S> g_pre = nn::relu_backward(c.down_y[std::size_t(s)], g_cur);
      g_cur = nn::conv_backward(d, c.down_in[std::size_t(s)], g_pre, grad ? &grad->downs[std::size_t(s)] : nullptr);
    }
    for (int b = p.arch.blocks_per_stage - 1; b >= 0; --b) {
      --bi;
      const auto& blk = p.blocks[std::size_t(bi)];
      const auto& bc = c.blocks[std::size_t(bi)];
      Grid<S> g_sum = nn::relu_backward(bc.y, g_cur);
      Grid<S> g_r = nn::conv_backward(blk.b, bc.r, g_sum, grad ? &grad->blocks[std::size_t(bi)].b : nullptr);
      Grid<S> g_h = nn::relu_backward(bc.r, g_r);
      Grid<S> g_x = nn::conv_backward(blk.a, bc.x, g_h, grad ? &grad->blocks[std::size_t(bi)].a : nullptr);
      g_x.m += g_sum.m;
      g_cur = std::move(g_x);
    }
  }
  Grid<S> g_entry = nn::relu_backward(c.re, g_cur);
  return nn::conv_backward(p.entry, c.input, g_entry, grad ? &grad->entry : nullptr);
}

template <class S>
S log_sum_exp(const VecX<S>& v) {
  const S m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

template <class S>
S cross_entropy(const VecX<S>& logits, int target) {
  return log_sum_exp(logits) - logits[target];
}

template <class S>
VecX<S> cross_entropy_grad(const VecX<S>& logits, int target) {
  VecX<S> g = (logits.array() - log_sum_exp(logits)).exp().matrix();  // softmax
  g[target] -= S(1);
  return g;
}

/// Cross-entropy of the classifier over the four groups, averaged per image.
/// Pooled fake inputs carry no generator graph here; gradients (taken in the
/// training step) reach classifier parameters only.
template <class S>
S classifier_loss(const std::vector<Grid<S>>& real_pos, const std::vector<Grid<S>>& real_neg,
                  const std::vector<Grid<S>>& pooled_fake_pos,
                  const std::vector<Grid<S>>& pooled_fake_neg, const ClassifierParams<S>& params) {
  S acc = S(0);
  int n = 0;
  auto add = [&](const std::vector<Grid<S>>& batch, int target) {
    for (const auto& img : batch) {
      acc += cross_entropy(classifier_forward(params, img), target);
      ++n;
    }
  };
  add(pooled_fake_pos, kFakePositive);
  add(pooled_fake_neg, kFakeNegative);
  add(real_pos, kRealPositive);
  add(real_neg, kRealNegative);
  return n == 0 ? S(0) : acc / S(n);
}

/// Cross-entropy pushing Cls(R_P) toward real-positive and Cls(R_N) toward
/// real-negative, averaged per classified image. The classifier is used as a
/// mapping here: its parameters receive no gradient; reconstruction inputs do.
template <class S>
S mapping_loss(const std::vector<Grid<S>>& recon_pos, const std::vector<Grid<S>>& recon_neg,
               const ClassifierParams<S>& params) {
  S acc = S(0);
  int n = 0;
  for (const auto& img : recon_pos) {
    acc += cross_entropy(classifier_forward(params, img), kRealPositive);
    ++n;
  }
  for (const auto& img : recon_neg) {
    acc += cross_entropy(classifier_forward(params, img), kRealNegative);
    ++n;
  }
  return n == 0 ? S(0) : acc / S(n);
}

/// Buffer of past reconstructions, after the cycle-GAN replay pool. While
/// below capacity every query stores its input and returns it; at capacity a
/// fair coin decides between returning the input and swapping it against a
/// uniformly chosen stored image.
template <class S>
struct ImagePool {
  int capacity = 50;
  std::vector<Grid<S>> stored;
  std::mt19937_64 rng;

  ImagePool() : rng(0) {}
  ImagePool(int cap, std::uint64_t seed) : capacity(cap), rng(seed) {
    if (cap < 1) throw std::invalid_argument("ImagePool: capacity must be >= 1");
  }
};

template <class S>
Grid<S> pool_query(ImagePool<S>& pool, const Grid<S>& image) {
  if (static_cast<int>(pool.stored.size()) < pool.capacity) {
    pool.stored.push_back(image);
    return image;
  }
  // rng order: coin first, slot only on swap
  if (uniform<S>(pool.rng, S(0), S(1)) < S(0.5)) {
    const int slot = uniform_int(pool.rng, 0, pool.capacity - 1);
    Grid<S> out = pool.stored[std::size_t(slot)];
    pool.stored[std::size_t(slot)] = image;
    return out;
  }
  return image;
}

}  // namespace cacl
