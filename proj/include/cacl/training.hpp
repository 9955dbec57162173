#pragma once

#include "cacl/autoencoder.hpp"
#include "cacl/checkpoint.hpp"
#include "cacl/classifier.hpp"
#include "cacl/codebook.hpp"
#include "cacl/config.hpp"
#include "cacl/data.hpp"
#include "cacl/metrics.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <vector>

namespace cacl {

/// Weighted per-term scalars of one step. `total` is the generator objective;
/// the classifier term is optimized by its own sub-step.
template <class S>
struct LossReport {
  S recon = 0, commit = 0, codebook = 0, map = 0, cls = 0, total = 0;
};

template <class S>
struct TrainState {
  TrainConfig config;
  std::uint64_t step = 0;
  AutoencoderParams<S> gen;
  CodebookPartitioned<S> codebook;
  ClassifierParams<S> cls;
  AutoencoderParams<S> gen_grads;
  ClassifierParams<S> cls_grads;
  AdamState<S> gen_opt, cls_opt;
  ImagePool<S> pool_pos, pool_neg;
  FeatureBank<S> bank;
  Eigen::VectorXi usage_window;
  std::mt19937_64 train_rng;

  static TrainState init(const TrainConfig& config) {
    config.validate();
    TrainState st;
    st.config = config;
    st.gen = AutoencoderParams<S>::init(config.dim, config.hidden, config.seed);
    st.codebook = init_codebook<S>(config.num_shared, config.num_class, config.dim,
                                   config.seed + 2, S(config.ema_decay));
    st.cls = ClassifierParams<S>::init(ClassifierArch::named(config.classifier), config.seed + 1);
    st.gen_grads = zeros_like(st.gen);
    st.cls_grads = zeros_like(st.cls);
    st.gen_opt = AdamState<S>::init_like(st.gen.tensors());
    st.cls_opt = AdamState<S>::init_like(st.cls.tensors());
    st.pool_pos = ImagePool<S>(config.pool_capacity, config.seed + 3);
    st.pool_neg = ImagePool<S>(config.pool_capacity, config.seed + 4);
    st.bank = FeatureBank<S>(config.dim, config.feature_bank_capacity);
    st.usage_window = Eigen::VectorXi::Zero(st.codebook.num_total());
    st.train_rng.seed(config.seed + 5);
    return st;
  }

  Checkpoint<S> to_checkpoint() const {
    Checkpoint<S> ck;
    ck.config = config;
    ck.step = step;
    ck.gen = gen;
    ck.codebook = codebook;
    ck.cls = cls;
    ck.gen_opt = gen_opt;
    ck.cls_opt = cls_opt;
    ck.pool_pos = pool_pos;
    ck.pool_neg = pool_neg;
    ck.bank = bank;
    ck.usage_window = usage_window;
    std::ostringstream rs;
    rs << train_rng;
    ck.train_rng = rs.str();
    return ck;
  }

  static TrainState from_checkpoint(const Checkpoint<S>& ck) {
    TrainState st;
    st.config = ck.config;
    st.step = ck.step;
    st.gen = ck.gen;
    st.codebook = ck.codebook;
    st.cls = ck.cls;
    st.gen_grads = zeros_like(st.gen);
    st.cls_grads = zeros_like(st.cls);
    st.gen_opt = ck.gen_opt;
    st.cls_opt = ck.cls_opt;
    st.pool_pos = ck.pool_pos;
    st.pool_neg = ck.pool_neg;
    st.bank = ck.bank;
    st.usage_window = ck.usage_window;
    std::istringstream rs(ck.train_rng);
    rs >> st.train_rng;
    return st;
  }
};

/// Everything the rest of the step needs from the generator pass: unweighted
/// batch-mean loss terms, detached reconstructions for the pools, and the
/// quantization statistics that feed the EMA update and dead-code bookkeeping.
template <class S>
struct GeneratorPhase {
  S recon = 0, commit = 0, codebook = 0, map = 0;
  std::vector<Grid<S>> recon_pos, recon_neg;
  std::vector<Grid<S>> features;
  std::vector<Eigen::VectorXi> qp_indices;
  std::vector<Label> labels;
  Eigen::VectorXi usage_counts;
};

/// Generator pass over one batch: forward both decode paths, evaluate the
/// four generator terms, and accumulate gradients into st.gen_grads.
///
/// Gradient routing:
///  - both decoder streams reach the features through the straight-through
///    identity,
///  - the commitment term contributes only its beta side (the other side is
///    stop-gradient; codes train by EMA, not by gradient),
///  - the divergence term reaches the features through the S+C path on the
///    class cells; the S-only map acts as a stop-gradient reference,
///  - the mapping term backpropagates through the classifier as a fixed map:
///    classifier parameters receive nothing (st.cls_grads is never touched).
template <class S>
GeneratorPhase<S> accumulate_generator_gradients(TrainState<S>& st,
                                                 const std::vector<LabeledPatch<S>>& batch) {
  const TrainConfig& cfg = st.config;
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw std::invalid_argument("train: empty batch");
  GeneratorPhase<S> out;
  out.usage_counts = Eigen::VectorXi::Zero(st.codebook.num_total());
  const DivergenceForm form =
      cfg.codebook_loss_form == "signed" ? DivergenceForm::Signed : DivergenceForm::Hinge;

  for (const auto& patch : batch) {
    DualCache<S> cache;
    auto [pair, qp, qn] = forward_dual(patch, st.gen, st.codebook, &cache);
    const int cells = cache.features.pixels();

    S recon_i = 0, commit_i = 0, div_i = 0, map_i = 0;
    if (cfg.w_recon > 0) recon_i = reconstruction_loss(patch, pair);
    if (cfg.w_commit > 0) commit_i = commitment_loss(cache.features, qp, S(cfg.beta));
    if (cfg.w_codebook > 0)
      div_i = codebook_divergence_loss(qn, qp, patch.label, S(cfg.margin), form);

    Grid<S> d_rp(3, patch.pixels.h, patch.pixels.w);
    Grid<S> d_rn(3, patch.pixels.h, patch.pixels.w);
    if (cfg.w_recon > 0) {
      const S scale = S(cfg.w_recon) * S(2) / (S(patch.pixels.m.size()) * S(B));
      if (patch.label == Label::Positive)
        d_rp.m = scale * (pair.recon_positive.m - patch.pixels.m);
      else
        d_rn.m = scale * (pair.recon_negative.m - patch.pixels.m);
    }
    if (cfg.w_map > 0) {
      ClassifierCache<S> cp, cn;
      const VecX<S> lp = classifier_forward(st.cls, pair.recon_positive, &cp);
      const VecX<S> ln = classifier_forward(st.cls, pair.recon_negative, &cn);
      map_i = cross_entropy(lp, kRealPositive) + cross_entropy(ln, kRealNegative);
      const S scale = S(cfg.w_map) / (S(2) * S(B));
      const VecX<S> gp = cross_entropy_grad(lp, kRealPositive) * scale;
      const VecX<S> gn = cross_entropy_grad(ln, kRealNegative) * scale;
      d_rp.m += classifier_backward(st.cls, cp, gp, nullptr).m;
      d_rn.m += classifier_backward(st.cls, cn, gn, nullptr).m;
    }

    Grid<S> dz = decoder_backward(st.gen, cache.dec_pos, d_rp, &st.gen_grads);
    dz.m += decoder_backward(st.gen, cache.dec_neg, d_rn, &st.gen_grads).m;

    if (cfg.w_commit > 0) {
      const S scale = S(cfg.w_commit) * S(2) * S(cfg.beta) / (S(cells) * S(B));
      dz.m += scale * (cache.features.m - qp.quantized.m);
    }
    if (cfg.w_codebook > 0) {
      int n_class = 0;
      for (int j = 0; j < cells; ++j) n_class += qp.from_class_partition[j] != 0;
      if (n_class > 0) {
        S sign;
        if (patch.label == Label::Negative) {
          sign = S(1);
        } else if (form == DivergenceForm::Signed) {
          sign = S(-1);
        } else {
          // hinge gradient is live only while d < margin
          const S d = codebook_divergence_loss(qn, qp, Label::Negative, S(cfg.margin), form);
          sign = d < S(cfg.margin) ? S(-1) : S(0);
        }
        const S scale = sign * S(cfg.w_codebook) * S(2) / (S(n_class) * S(B));
        for (int j = 0; j < cells; ++j)
          if (qp.from_class_partition[j])
            dz.m.col(j) += scale * (qp.quantized.m.col(j) - qn.quantized.m.col(j));
      }
    }

    encoder_backward(st.gen, cache.enc, dz, &st.gen_grads);

    out.recon += recon_i / S(B);
    out.commit += commit_i / S(B);
    out.codebook += div_i / S(B);
    out.map += map_i / (S(2) * S(B));
    for (int j = 0; j < cells; ++j) ++out.usage_counts[qp.indices[j]];
    out.recon_pos.push_back(std::move(pair.recon_positive));
    out.recon_neg.push_back(std::move(pair.recon_negative));
    out.features.push_back(std::move(cache.features));
    out.qp_indices.push_back(std::move(qp.indices));
    out.labels.push_back(patch.label);
  }
  return out;
}

/// Classifier pass: reconstructions are routed through the replay pools and
/// classified as fakes, the batch itself as reals. Pool contents carry no
/// generator graph, so gradients land in st.cls_grads only.
template <class S>
S accumulate_classifier_gradients(TrainState<S>& st, const std::vector<LabeledPatch<S>>& batch,
                                  const std::vector<Grid<S>>& recon_pos,
                                  const std::vector<Grid<S>>& recon_neg) {
  std::vector<Grid<S>> fake_pos, fake_neg;
  fake_pos.reserve(recon_pos.size());
  fake_neg.reserve(recon_neg.size());
  for (const auto& r : recon_pos) fake_pos.push_back(pool_query(st.pool_pos, r));
  for (const auto& r : recon_neg) fake_neg.push_back(pool_query(st.pool_neg, r));

  const int n_images = static_cast<int>(batch.size() + fake_pos.size() + fake_neg.size());
  const S grad_scale = S(st.config.w_cls) / S(n_images);
  S acc = 0;
  auto run = [&](const Grid<S>& img, int target) {
    ClassifierCache<S> c;
    const VecX<S> logits = classifier_forward(st.cls, img, &c);
    acc += cross_entropy(logits, target);
    const VecX<S> g = cross_entropy_grad(logits, target) * grad_scale;
    classifier_backward(st.cls, c, g, &st.cls_grads);
  };
  for (const auto& img : fake_pos) run(img, kFakePositive);
  for (const auto& img : fake_neg) run(img, kFakeNegative);
  for (const auto& patch : batch)
    run(patch.pixels, patch.label == Label::Positive ? kRealPositive : kRealNegative);
  return acc / S(n_images);
}

template <class S>
void check_finite(S value, const char* term, std::uint64_t step) {
  if (!std::isfinite(double(value)))
    throw std::runtime_error("training aborted: non-finite " + std::string(term) + " loss at step " +
                             std::to_string(step));
}

/// One optimization step: (a) generator update from the weighted four-term
/// objective, followed by the EMA codebook update and dead-code bookkeeping;
/// (b) classifier update with pool-routed reconstructions. Weights at zero
/// gate their term out entirely (reported as zero, no gradient contribution).
template <class S>
LossReport<S> train_step(TrainState<S>& st, const std::vector<LabeledPatch<S>>& batch) {
  const TrainConfig& cfg = st.config;

  for (auto* t : st.gen_grads.tensors()) t->setZero();
  for (auto* t : st.cls_grads.tensors()) t->setZero();

  GeneratorPhase<S> phase = accumulate_generator_gradients(st, batch);

  LossReport<S> rep;
  rep.recon = S(cfg.w_recon) * phase.recon;
  rep.commit = S(cfg.w_commit) * phase.commit;
  rep.codebook = S(cfg.w_codebook) * phase.codebook;
  rep.map = S(cfg.w_map) * phase.map;
  rep.total = rep.recon + rep.commit + rep.codebook + rep.map;
  check_finite(rep.recon, "reconstruction", st.step);
  check_finite(rep.commit, "commitment", st.step);
  check_finite(rep.codebook, "codebook-divergence", st.step);
  check_finite(rep.map, "mapping", st.step);

  adam_step(st.gen.tensors(), st.gen_grads.tensors(), st.gen_opt, S(cfg.lr_generator));

  // EMA over this batch's S+C assignments (features from before the update).
  // With class-aware EMA, cells of negative patches that grabbed a class code
  // do not contribute: class codes learn from positive evidence only.
  {
    const int cells_per = phase.features.empty() ? 0 : phase.features.front().pixels();
    std::vector<int> keep_patch, keep_cell;
    for (std::size_t i = 0; i < phase.features.size(); ++i)
      for (int j = 0; j < cells_per; ++j) {
        const int code = phase.qp_indices[i][j];
        if (cfg.class_aware_ema && phase.labels[i] == Label::Negative &&
            st.codebook.in_class_partition(code))
          continue;
        keep_patch.push_back(static_cast<int>(i));
        keep_cell.push_back(j);
      }
    if (!keep_patch.empty()) {
      Grid<S> concat(st.codebook.dim, static_cast<int>(keep_patch.size()), 1);
      QuantizationResult<S> assign;
      assign.indices.resize(static_cast<int>(keep_patch.size()));
      for (std::size_t k = 0; k < keep_patch.size(); ++k) {
        concat.m.col(long(k)) = phase.features[std::size_t(keep_patch[k])].m.col(keep_cell[k]);
        assign.indices[long(k)] = phase.qp_indices[std::size_t(keep_patch[k])][keep_cell[k]];
      }
      st.codebook = ema_update(std::move(st.codebook), concat, assign);
    }
  }

  // refresh the recent-feature bank from random cells of this batch
  {
    const int cells_per = phase.features.front().pixels();
    for (int draw = 0; draw < 32; ++draw) {
      const int pi = uniform_int(st.train_rng, 0, static_cast<int>(phase.features.size()) - 1);
      const int ci = uniform_int(st.train_rng, 0, cells_per - 1);
      st.bank.push(phase.features[std::size_t(pi)].m.col(ci),
                   phase.labels[std::size_t(pi)] == Label::Positive);
    }
  }

  st.usage_window += phase.usage_counts;
  if ((st.step + 1) % std::uint64_t(cfg.dead_code_interval) == 0) {
    const std::uint64_t seed = st.train_rng();
    st.codebook =
        dead_code_reinit(std::move(st.codebook), st.usage_window, cfg.dead_code_threshold, st.bank, seed);
    st.usage_window.setZero();
  }

  if (cfg.w_cls > 0) {
    const S cls_mean = accumulate_classifier_gradients(st, batch, phase.recon_pos, phase.recon_neg);
    rep.cls = S(cfg.w_cls) * cls_mean;
    check_finite(rep.cls, "classifier", st.step);
    adam_step(st.cls.tensors(), st.cls_grads.tensors(), st.cls_opt, S(cfg.lr_classifier));
  }

  ++st.step;
  return rep;
}

/// Balanced batch draw: the first half positive, the rest negative, sampled
/// with replacement; optional horizontal/vertical flips.
template <class S>
std::vector<LabeledPatch<S>> sample_batch(TrainState<S>& st,
                                          const std::vector<LabeledPatch<S>>& pos,
                                          const std::vector<LabeledPatch<S>>& neg) {
  const int B = st.config.batch_size;
  std::vector<LabeledPatch<S>> batch;
  batch.reserve(std::size_t(B));
  for (int i = 0; i < B; ++i) {
    const bool want_pos = i < (B + 1) / 2;
    const auto& source = want_pos ? pos : neg;
    LabeledPatch<S> p = source[std::size_t(uniform_int(st.train_rng, 0, int(source.size()) - 1))];
    if (st.config.augment_flips) {
      if (uniform_int(st.train_rng, 0, 1)) p.pixels = flip_horizontal(p.pixels);
      if (uniform_int(st.train_rng, 0, 1)) p.pixels = flip_vertical(p.pixels);
    }
    batch.push_back(std::move(p));
  }
  return batch;
}

template <class S>
struct ValRecord {
  Grid<S> image;
  MaskGrid gt;
};

/// Mean validation Dice of the current codebook attention, no dilation.
template <class S>
std::optional<double> validation_dice(const TrainState<S>& st, const std::vector<ValRecord<S>>& val) {
  if (val.empty()) return std::nullopt;
  double acc = 0;
  for (const auto& r : val) {
    const SegmentationMask m = segment_image(st.gen, st.codebook, r.image, 0);
    acc += dice(m.pixels, r.gt);
  }
  return acc / double(val.size());
}

template <class S>
struct TrainResult {
  Checkpoint<S> checkpoint;
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
};

namespace detail {

template <class S>
void load_split_patches(const DatasetManifest& manifest, Split split,
                        std::vector<LabeledPatch<S>>* pos, std::vector<LabeledPatch<S>>* neg,
                        std::vector<ValRecord<S>>* vals) {
  for (const auto& rec : manifest.records) {
    if (rec.split != split) continue;
    Grid<S> img = to_grid<S>(read_png(manifest.dir / rec.path));
    if (vals) {
      if (rec.mask_path.empty()) continue;
      vals->push_back({std::move(img), mask_from_png(read_png(manifest.dir / rec.mask_path))});
      continue;
    }
    LabeledPatch<S> p{std::move(img), rec.label};
    (rec.label == Label::Positive ? pos : neg)->push_back(std::move(p));
  }
}

inline void check_split_disjointness(const DatasetManifest& manifest) {
  std::map<std::string, Split> seen;
  for (const auto& rec : manifest.records) {
    auto [it, inserted] = seen.emplace(rec.path, rec.split);
    if (!inserted && it->second != rec.split)
      throw std::invalid_argument("train: path appears in multiple splits: " + rec.path);
  }
}

}  // namespace detail

/// Full training run. Writes a rolling checkpoint (atomic replace) at the
/// configured interval and a tab-separated evaluation log. With a resume
/// path, picks the run up from that checkpoint's exact state; only the step
/// target is taken from the fresh config.
template <class S>
TrainResult<S> train(TrainConfig config, const DatasetManifest& manifest,
                     const std::filesystem::path& out_dir,
                     const std::filesystem::path& resume_path = {}) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  detail::check_split_disjointness(manifest);

  std::vector<LabeledPatch<S>> pos, neg;
  detail::load_split_patches<S>(manifest, Split::Train, &pos, &neg, nullptr);
  std::vector<ValRecord<S>> vals;
  detail::load_split_patches<S>(manifest, Split::Val, nullptr, nullptr, &vals);
  if (pos.empty() && neg.empty()) throw std::invalid_argument("train: empty training split");
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("train: both classes must be present in the training split");

  TrainState<S> st;
  const bool resuming = !resume_path.empty();
  if (resuming) {
    st = TrainState<S>::from_checkpoint(load_checkpoint<S>(resume_path));
    st.config.steps = config.steps;
  } else {
    st = TrainState<S>::init(config);
  }

  const std::filesystem::path log_path = out_dir / "train_log.tsv";
  std::ofstream log(log_path, resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot open log " + log_path.string());
  if (!resuming) log << "step\trecon\tcommit\tcodebook\tmap\tcls\ttotal\tval_dice\n";
  log.precision(6);
  log << std::fixed;

  const std::filesystem::path ck_path = out_dir / "checkpoint.bin";
  const std::uint64_t total = std::uint64_t(st.config.steps);
  while (st.step < total) {
    auto batch = sample_batch(st, pos, neg);
    const LossReport<S> rep = train_step(st, batch);
    const bool last = st.step == total;
    if (st.step % std::uint64_t(st.config.eval_interval) == 0 || last) {
      const auto vd = validation_dice(st, vals);
      log << st.step << '\t' << rep.recon << '\t' << rep.commit << '\t' << rep.codebook << '\t'
          << rep.map << '\t' << rep.cls << '\t' << rep.total << '\t';
      if (vd) log << *vd;
      else log << '-';
      log << '\n';
      log.flush();
    }
    if (st.step % std::uint64_t(st.config.checkpoint_interval) == 0 || last)
      save_checkpoint(st.to_checkpoint(), ck_path);
  }

  TrainResult<S> result;
  result.checkpoint = st.to_checkpoint();
  result.checkpoint_path = ck_path;
  result.log_path = log_path;
  return result;
}

}  // namespace cacl
