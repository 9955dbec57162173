#pragma once

#include "cacl/core.hpp"

#include <algorithm>
#include <limits>
#include <vector>

namespace cacl {

/// Epsilon in the EMA denominator when turning accumulators into code vectors.
inline constexpr double kEmaEps = 1e-5;

/// Learned code vectors split into a shared partition S and a class partition
/// C. Codes are stored as one dim x total matrix, one code per column, with
/// the shared partition occupying the leading columns. Global code ids index
/// into that layout, so S and C are disjoint index ranges by construction.
///
/// EMA accumulators (one count and one dim-wide sum per code) carry the
/// running assignment statistics used to move codes; code vectors are not
/// gradient parameters.
template <class S>
struct CodebookPartitioned {
  MatX<S> codes;      // dim x (num_shared + num_class)
  int n_shared = 0;
  int dim = 0;
  VecX<S> ema_counts; // per code, >= 0
  MatX<S> ema_sums;   // dim x total
  S decay = S(0.99);

  int num_shared() const { return n_shared; }
  int num_class() const { return static_cast<int>(codes.cols()) - n_shared; }
  int num_total() const { return static_cast<int>(codes.cols()); }

  auto shared_codes() { return codes.leftCols(n_shared); }
  auto shared_codes() const { return codes.leftCols(n_shared); }
  auto class_codes() { return codes.rightCols(num_class()); }
  auto class_codes() const { return codes.rightCols(num_class()); }

  auto code(int k) { return codes.col(k); }
  auto code(int k) const { return codes.col(k); }

  bool in_class_partition(int k) const { return k >= n_shared; }
};

enum class CodeSubset { SharedOnly, SharedAndClass };

/// Output of one quantization pass over a feature grid.
template <class S>
struct QuantizationResult {
  Grid<S> quantized;                                       // dim x (h*w), cell j = codes[indices[j]]
  Eigen::VectorXi indices;                                 // h*w global code ids
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> from_class_partition;  // h*w, 1 where id in C
  S commitment_value = S(0);                               // mean over cells of ||f - q||^2
};

template <class S>
CodebookPartitioned<S> init_codebook(int num_shared, int num_class, int dim, std::uint64_t seed,
                                     S decay = S(0.99)) {
  if (num_shared < 1 || num_class < 1 || dim < 1)
    throw std::invalid_argument("init_codebook: sizes must be >= 1");
  if (!(decay > S(0) && decay < S(1)))
    throw std::invalid_argument("init_codebook: decay must lie in (0,1)");
  const int total = num_shared + num_class;
  CodebookPartitioned<S> cb;
  cb.n_shared = num_shared;
  cb.dim = dim;
  cb.decay = decay;
  cb.codes.resize(dim, total);
  std::mt19937_64 rng(seed);
  const S bound = S(1) / S(total);
  for (int k = 0; k < total; ++k)
    for (int d = 0; d < dim; ++d) cb.codes(d, k) = uniform<S>(rng, -bound, bound);
  cb.ema_counts = VecX<S>::Zero(total);
  cb.ema_sums = MatX<S>::Zero(dim, total);
  return cb;
}

/// Nearest-code lookup restricted to the allowed subset. Distances are ranked
/// by ||c||^2 - 2 c.f (the ||f||^2 term is constant per cell); ties resolve to
/// the lowest global code index. The training-time gradient contract is
/// straight-through: gradients arriving at `quantized` pass to the features
/// unchanged (see training.hpp backward pass).
template <class S>
QuantizationResult<S> quantize(const Grid<S>& features, const CodebookPartitioned<S>& codebook,
                               CodeSubset subset) {
  if (features.channels() != codebook.dim)
    throw ShapeError("quantize: feature dim does not match codebook dim");
  const int cells = features.pixels();
  const int k_allowed =
      subset == CodeSubset::SharedOnly ? codebook.num_shared() : codebook.num_total();

  QuantizationResult<S> out;
  out.quantized = Grid<S>(codebook.dim, features.h, features.w);
  out.indices.resize(cells);
  out.from_class_partition.resize(cells);

  const auto allowed = codebook.codes.leftCols(k_allowed);
  const VecX<S> code_sq = allowed.colwise().squaredNorm().transpose();
  // scores(k, j) = ||c_k||^2 - 2 c_k . f_j. Each code's row is computed as
  // its own product: a blocked GEMM may evaluate different row blocks with
  // different kernels, and exact ties between value-identical codes (the
  // duplicated-partition invariant) must survive bit for bit.
  MatX<S> scores(k_allowed, cells);
  for (int k = 0; k < k_allowed; ++k)
    scores.row(k).noalias() = S(-2) * (codebook.codes.col(k).transpose() * features.m);
  scores.colwise() += code_sq;

  S commit_acc = S(0);
  for (int j = 0; j < cells; ++j) {
    int best = 0;
    S best_score = scores(0, j);
    for (int k = 1; k < k_allowed; ++k) {
      if (scores(k, j) < best_score) {
        best_score = scores(k, j);
        best = k;
      }
    }
    out.indices[j] = best;
    out.from_class_partition[j] = codebook.in_class_partition(best) ? 1 : 0;
    out.quantized.m.col(j) = codebook.codes.col(best);
    commit_acc += (features.m.col(j) - out.quantized.m.col(j)).squaredNorm();
  }
  out.commitment_value = commit_acc / S(cells);
  return out;
}

/// Commitment objective: ||sg[f] - q||^2 + beta ||sg[q] - f||^2, averaged over
/// cells. Both terms share the same value; they differ only in which side the
/// stop-gradient freezes, so only the beta term reaches the encoder during
/// backprop (codes themselves train by EMA, not by gradient).
template <class S>
S commitment_loss(const Grid<S>& features, const QuantizationResult<S>& result, S beta) {
  if (beta < S(0)) throw std::invalid_argument("commitment_loss: beta must be >= 0");
  if (!features.same_shape(result.quantized))
    throw ShapeError("commitment_loss: features and quantized shapes differ");
  const int cells = features.pixels();
  S acc = S(0);
  for (int j = 0; j < cells; ++j)
    acc += (features.m.col(j) - result.quantized.m.col(j)).squaredNorm();
  const S mean_sq = acc / S(cells);
  return mean_sq + beta * mean_sq;
}

/// One EMA step over the assignment statistics of `result`:
///   counts <- decay * counts + (1 - decay) * n_k
///   sums   <- decay * sums   + (1 - decay) * sum of assigned features
///   code_k <- sums_k / max(counts_k, eps)   (codes never assigned stay put)
template <class S>
CodebookPartitioned<S> ema_update(CodebookPartitioned<S> codebook, const Grid<S>& features,
                                  const QuantizationResult<S>& result) {
  if (!(codebook.decay > S(0) && codebook.decay < S(1)))
    throw std::invalid_argument("ema_update: decay must lie in (0,1)");
  if (features.channels() != codebook.dim || result.indices.size() != features.pixels())
    throw ShapeError("ema_update: result does not match features/codebook");

  const int total = codebook.num_total();
  VecX<S> counts = VecX<S>::Zero(total);
  MatX<S> sums = MatX<S>::Zero(codebook.dim, total);
  for (int j = 0; j < features.pixels(); ++j) {
    const int k = result.indices[j];
    counts[k] += S(1);
    sums.col(k) += features.m.col(j);
  }

  const S d = codebook.decay;
  codebook.ema_counts = d * codebook.ema_counts + (S(1) - d) * counts;
  codebook.ema_sums = d * codebook.ema_sums + (S(1) - d) * sums;
  for (int k = 0; k < total; ++k) {
    if (codebook.ema_counts[k] > S(0)) {
      const S denom = std::max(codebook.ema_counts[k], S(kEmaEps));
      codebook.codes.col(k) = codebook.ema_sums.col(k) / denom;
    }
  }
  return codebook;
}

/// Ring buffer of recent encoder outputs, tagged by the source patch label.
/// Dead-code reinitialization draws replacement vectors from here.
template <class S>
struct FeatureBank {
  MatX<S> feats;  // dim x capacity
  std::vector<std::uint8_t> from_positive;
  int size = 0;
  int next = 0;

  FeatureBank() = default;
  FeatureBank(int dim, int capacity) : feats(MatX<S>::Zero(dim, capacity)), from_positive(capacity, 0) {}

  int capacity() const { return static_cast<int>(feats.cols()); }

  template <class Derived>
  void push(const Eigen::MatrixBase<Derived>& f, bool positive) {
    feats.col(next) = f;
    from_positive[static_cast<std::size_t>(next)] = positive ? 1 : 0;
    next = (next + 1) % capacity();
    size = std::min(size + 1, capacity());
  }
};

/// Re-seed codes whose usage over the window is <= threshold with a recent
/// encoder output. Shared codes draw uniformly from the bank. Class-partition
/// codes draw a random candidate set from positive-patch outputs and keep the
/// candidate the shared partition explains worst (largest distance to its
/// nearest shared code): those are the features that can only be
/// discriminative, which keeps re-seeded class codes off the common
/// background. Partition sizes never change. No-op when the bank is empty.
template <class S>
CodebookPartitioned<S> dead_code_reinit(CodebookPartitioned<S> codebook,
                                        const Eigen::VectorXi& usage_window, int threshold,
                                        const FeatureBank<S>& bank, std::uint64_t seed) {
  if (threshold < 0) throw std::invalid_argument("dead_code_reinit: threshold must be >= 0");
  if (usage_window.size() != codebook.num_total())
    throw std::invalid_argument("dead_code_reinit: usage window must cover all codes");
  if (bank.size == 0) return codebook;

  std::vector<int> positive_slots;
  for (int i = 0; i < bank.size; ++i)
    if (bank.from_positive[static_cast<std::size_t>(i)]) positive_slots.push_back(i);

  auto distance_to_shared = [&](int slot) {
    S best = std::numeric_limits<S>::infinity();
    for (int s = 0; s < codebook.num_shared(); ++s)
      best = std::min(best, S((bank.feats.col(slot) - codebook.codes.col(s)).squaredNorm()));
    return best;
  };

  std::mt19937_64 rng(seed);
  constexpr int kCandidates = 16;
  for (int k = 0; k < codebook.num_total(); ++k) {
    if (usage_window[k] > threshold) continue;
    int slot;
    if (codebook.in_class_partition(k) && !positive_slots.empty()) {
      slot = positive_slots[static_cast<std::size_t>(
          uniform_int(rng, 0, static_cast<int>(positive_slots.size()) - 1))];
      S best_d = distance_to_shared(slot);
      for (int c = 1; c < kCandidates; ++c) {
        const int cand = positive_slots[static_cast<std::size_t>(
            uniform_int(rng, 0, static_cast<int>(positive_slots.size()) - 1))];
        const S d = distance_to_shared(cand);
        if (d > best_d) {
          best_d = d;
          slot = cand;
        }
      }
    } else {
      slot = uniform_int(rng, 0, bank.size - 1);
    }
    codebook.codes.col(k) = bank.feats.col(slot);
    codebook.ema_counts[k] = S(1);
    codebook.ema_sums.col(k) = codebook.codes.col(k);
  }
  return codebook;
}

/// from_class_partition reshaped to the feature raster, as a {0,1} grid.
template <class S>
MaskGrid usage_grid(const QuantizationResult<S>& r) {
  const int h = r.quantized.h, w = r.quantized.w;
  MaskGrid g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g(y, x) = r.from_class_partition[y * w + x];
  return g;
}

}  // namespace cacl
