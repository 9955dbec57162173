#pragma once

#include "cacl/baselines.hpp"
#include "cacl/checkpoint.hpp"
#include "cacl/data.hpp"
#include "cacl/metrics.hpp"
#include "cacl/plot.hpp"
#include "cacl/segmentation.hpp"
#include "cacl/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace cacl::cli {

/// Training and inference run in single precision; metrics are double.
using Scalar = float;

inline std::filesystem::path data_root() {
  if (const char* env = std::getenv("CACL_DATA_DIR")) return env;
  return "data";
}

inline std::array<double, 3> parse_fractions(const std::string& s) {
  std::array<double, 3> f{};
  std::istringstream ss(s);
  char c1, c2;
  if (!(ss >> f[0] >> c1 >> f[1] >> c2 >> f[2]) || c1 != ',' || c2 != ',' || !(ss >> std::ws).eof())
    throw CLI::ValidationError("--fractions", "expected three comma-separated numbers");
  return f;
}

inline void cmd_synth(const std::filesystem::path& out, int n_pos, int n_neg, int size,
                      std::uint64_t seed, const std::string& fractions) {
  SyntheticConfig cfg;
  cfg.n_pos = n_pos;
  cfg.n_neg = n_neg;
  cfg.image_size = size;
  cfg.seed = seed;
  DatasetManifest manifest = generate_synthetic(cfg, out);
  manifest = split_manifest(std::move(manifest), parse_fractions(fractions), seed);
  save_manifest(manifest, out / "manifest.tsv");
  int tr = 0, va = 0, te = 0;
  for (const auto& r : manifest.records) {
    tr += r.split == Split::Train;
    va += r.split == Split::Val;
    te += r.split == Split::Test;
  }
  std::cout << "wrote " << manifest.records.size() << " patches (" << tr << " train, " << va
            << " val, " << te << " test) under " << out.string() << "\n";
}

inline void cmd_train(const std::filesystem::path& manifest_path, const std::filesystem::path& out,
                      const std::string& config_path, const std::vector<std::string>& sets,
                      std::optional<std::uint64_t> seed, std::optional<int> steps,
                      const std::string& resume) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = TrainConfig::from_file(config_path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--set", "expected key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (seed) cfg.seed = *seed;
  if (steps) cfg.steps = *steps;
  const DatasetManifest manifest = load_manifest(manifest_path);
  const TrainResult<Scalar> result = train<Scalar>(cfg, manifest, out, resume);
  std::cout << "trained " << result.checkpoint.step << " steps; checkpoint at "
            << result.checkpoint_path.string() << ", log at " << result.log_path.string() << "\n";
}

struct MethodChoice {
  std::string name;  // cacl | colordeconv
  std::filesystem::path checkpoint;
  double threshold = 0;
  bool threshold_set = false;
};

inline Grid<Scalar> overlay_mask(const Grid<Scalar>& image, const MaskGrid& mask) {
  Grid<Scalar> out = image;
  const Scalar a = Scalar(0.45);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      if (!mask(y, x)) continue;
      out.at(0, y, x) = (Scalar(1) - a) * out.at(0, y, x) + a;
      out.at(1, y, x) = (Scalar(1) - a) * out.at(1, y, x);
      out.at(2, y, x) = (Scalar(1) - a) * out.at(2, y, x);
    }
  return out;
}

inline void cmd_segment(const MethodChoice& method, const std::string& manifest_path,
                        const std::string& input, const std::string& split_name,
                        const std::filesystem::path& out, int dilate_radius, bool overlay) {
  std::filesystem::create_directories(out);
  std::optional<Checkpoint<Scalar>> ck;
  if (method.name == "cacl") ck = load_checkpoint<Scalar>(method.checkpoint);

  auto run_one = [&](const Grid<Scalar>& image, const std::string& id) {
    SegmentationMask mask =
        ck ? segment_image(*ck, image, dilate_radius, id)
           : [&] {
               if (!method.threshold_set)
                 throw std::runtime_error("segment: --threshold is required for colordeconv");
               SegmentationMask m = colordeconv_segment(image, StainMatrix<Scalar>::hdab(),
                                                        Scalar(method.threshold), id);
               if (dilate_radius > 0) m = dilate(m, dilate_radius);
               return m;
             }();
    const std::string stem = std::filesystem::path(id).stem().string();
    write_png(out / (stem + "_mask.png"), to_png_gray(mask.pixels));
    if (overlay) write_png(out / (stem + "_overlay.png"), to_png_rgb(overlay_mask(image, mask.pixels)));
  };

  if (!input.empty()) {
    run_one(to_grid<Scalar>(read_png(input)), std::filesystem::path(input).filename().string());
    std::cout << "wrote 1 mask under " << out.string() << "\n";
    return;
  }
  const DatasetManifest manifest = load_manifest(manifest_path);
  const Split split = parse_split(split_name);
  int n = 0;
  for (const auto& rec : manifest.records) {
    if (rec.split != split) continue;
    run_one(to_grid<Scalar>(read_png(manifest.dir / rec.path)), rec.path);
    ++n;
  }
  std::cout << "wrote " << n << " masks under " << out.string() << "\n";
}

inline MetricsReport evaluate_cacl(const Checkpoint<Scalar>& ck, const DatasetManifest& manifest,
                                   Split split, int dilate_radius) {
  std::function<SegmenterOutput(const Grid<Scalar>&, const ManifestRecord&)> seg =
      [&](const Grid<Scalar>& image, const ManifestRecord& rec) {
        SegmenterOutput out;
        out.mask = segment_image(ck, image, dilate_radius, rec.path);
        return out;
      };
  TrainConfig cfg = ck.config;
  return evaluate<Scalar>(manifest, split, seg, dilate_radius > 0 ? "cacl+morph" : "cacl",
                          cfg.snapshot());
}

inline MetricsReport evaluate_colordeconv(const DatasetManifest& manifest, Split split,
                                          double threshold, int dilate_radius, bool soft_bce) {
  const auto stains = StainMatrix<Scalar>::hdab();
  std::function<SegmenterOutput(const Grid<Scalar>&, const ManifestRecord&)> seg =
      [&, threshold](const Grid<Scalar>& image, const ManifestRecord& rec) {
        SegmenterOutput out;
        out.mask = colordeconv_segment(image, stains, Scalar(threshold), rec.path);
        if (dilate_radius > 0) out.mask = dilate(out.mask, dilate_radius);
        if (soft_bce) {
          const ArrXX<Scalar> conc = dab_concentration(image, stains);
          ArrXX<double> prob(conc.rows(), conc.cols());
          for (int i = 0; i < conc.size(); ++i)
            prob.data()[i] = 1.0 / (1.0 + std::exp(-(double(conc.data()[i]) - threshold)));
          out.prob = std::move(prob);
        }
        return out;
      };
  std::ostringstream snap;
  snap << "threshold = " << threshold << "\nsoft_bce = " << (soft_bce ? "true" : "false") << "\n";
  return evaluate<Scalar>(manifest, split, seg, "colordeconv", snap.str());
}

/// Best-mean-Dice threshold over a fixed sweep grid, mirroring the manual
/// tuning the baseline needs in practice.
inline std::pair<double, MetricsReport> sweep_colordeconv(const DatasetManifest& manifest,
                                                          Split split, int dilate_radius,
                                                          bool soft_bce) {
  double best_t = 0;
  MetricsReport best;
  bool have = false;
  for (int i = 0; i <= 40; ++i) {
    const double t = 0.02 + i * (2.0 - 0.02) / 40.0;
    MetricsReport r = evaluate_colordeconv(manifest, split, t, dilate_radius, soft_bce);
    if (!have || r.mean_dice > best.mean_dice) {
      have = true;
      best = std::move(r);
      best_t = t;
    }
  }
  return {best_t, std::move(best)};
}

inline void cmd_evaluate(const MethodChoice& method, const std::string& manifest_path,
                         const std::string& split_name, const std::filesystem::path& out,
                         int dilate_radius, bool sweep, bool soft_bce) {
  std::filesystem::create_directories(out);
  const DatasetManifest manifest = load_manifest(manifest_path);
  const Split split = parse_split(split_name);

  MetricsReport report;
  if (method.name == "cacl") {
    const auto ck = load_checkpoint<Scalar>(method.checkpoint);
    report = evaluate_cacl(ck, manifest, split, dilate_radius);
  } else if (sweep) {
    auto [t, r] = sweep_colordeconv(manifest, split, dilate_radius, soft_bce);
    report = std::move(r);
    report.config_snapshot = "threshold = " + std::to_string(t) + " (best of sweep)\n";
    std::cout << "sweep best threshold " << t << "\n";
  } else {
    if (!method.threshold_set)
      throw std::runtime_error("evaluate: colordeconv needs --threshold or --sweep");
    report = evaluate_colordeconv(manifest, split, method.threshold, dilate_radius, soft_bce);
  }

  save_report_text(report, out / "report.tsv");
  save_report_json(report, out / "report.json");
  std::cout << "method " << report.method << ": dice " << report.mean_dice << " precision "
            << report.mean_precision << " recall " << report.mean_recall << " bce "
            << report.mean_bce << " (" << report.per_image.size() << " images";
  if (report.skipped_records) std::cout << ", " << report.skipped_records << " skipped";
  std::cout << ")\nreports under " << out.string() << "\n";
}

inline void cmd_plots(const std::vector<std::string>& report_paths,
                      const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  std::vector<MetricsReport> reports;
  for (const auto& p : report_paths) reports.push_back(load_report_json(p));
  const std::array<std::pair<const char*, double MetricsReport::*>, 4> metrics = {{
      {"dice", &MetricsReport::mean_dice},
      {"precision", &MetricsReport::mean_precision},
      {"recall", &MetricsReport::mean_recall},
      {"bce", &MetricsReport::mean_bce},
  }};
  for (const auto& [name, field] : metrics) {
    BarChartSpec spec;
    spec.title = name;
    for (const auto& r : reports) {
      spec.labels.push_back(r.method);
      spec.values.push_back(r.*field);
    }
    render_bar_chart(spec, out / (std::string("metric_") + name + ".png"));
  }
  std::cout << "wrote 4 charts under " << out.string() << "\n";
}

inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"class-aware codebook learning for weakly supervised diffuse-pattern segmentation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate the synthetic diffuse-stain dataset");
  std::string synth_out = (data_root() / "dataset").string();
  int n_pos = 310, n_neg = 310, size = 64;
  std::uint64_t synth_seed = 1234;
  std::string fractions = "0.66,0.17,0.17";
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();
  synth->add_option("--n-pos", n_pos, "positive patches")->capture_default_str();
  synth->add_option("--n-neg", n_neg, "negative patches")->capture_default_str();
  synth->add_option("--size", size, "patch size in pixels")->capture_default_str();
  synth->add_option("--seed", synth_seed, "rng seed")->capture_default_str();
  synth->add_option("--fractions", fractions, "train,val,test fractions")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train the dual-codebook model");
  std::string tr_manifest = (data_root() / "dataset" / "manifest.tsv").string();
  std::string tr_out = "runs/latest", tr_config, tr_resume;
  std::vector<std::string> tr_sets;
  std::uint64_t tr_seed = 0;
  int tr_steps = 0;
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "override config seed");
  auto* tr_steps_opt = tr->add_option("--steps", tr_steps, "override config steps");
  tr->add_option("--manifest", tr_manifest, "dataset manifest")->capture_default_str();
  tr->add_option("--out", tr_out, "run directory")->capture_default_str();
  tr->add_option("--config", tr_config, "key = value config file");
  tr->add_option("--set", tr_sets, "override a config key, key=value (repeatable)");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  // segment
  auto* seg = app.add_subcommand("segment", "write segmentation masks");
  MethodChoice seg_method;
  seg_method.name = "cacl";
  std::string seg_manifest = (data_root() / "dataset" / "manifest.tsv").string();
  std::string seg_input, seg_split = "test", seg_ck;
  std::string seg_out = "masks";
  int seg_dilate = 0;
  bool seg_overlay = false;
  seg->add_option("--method", seg_method.name, "cacl | colordeconv")
      ->check(CLI::IsMember({"cacl", "colordeconv"}))
      ->capture_default_str();
  seg->add_option("--checkpoint", seg_ck, "trained checkpoint (cacl method)");
  auto* seg_thr = seg->add_option("--threshold", seg_method.threshold,
                                  "DAB concentration threshold (colordeconv method)");
  seg->add_option("--manifest", seg_manifest, "dataset manifest")->capture_default_str();
  seg->add_option("--input", seg_input, "segment a single image instead of a manifest split");
  seg->add_option("--split", seg_split, "manifest split to segment")->capture_default_str();
  seg->add_option("--out", seg_out, "output directory")->capture_default_str();
  seg->add_option("--dilate", seg_dilate, "morphological dilation radius")->capture_default_str();
  seg->add_flag("--overlay", seg_overlay, "also write mask overlays");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "compute Dice/Precision/Recall/BCE over a split");
  MethodChoice ev_method;
  ev_method.name = "cacl";
  std::string ev_manifest = (data_root() / "dataset" / "manifest.tsv").string();
  std::string ev_split = "test", ev_ck, ev_out = "eval";
  int ev_dilate = 0;
  bool ev_sweep = false, ev_soft = false;
  ev->add_option("--method", ev_method.name, "cacl | colordeconv")
      ->check(CLI::IsMember({"cacl", "colordeconv"}))
      ->capture_default_str();
  ev->add_option("--checkpoint", ev_ck, "trained checkpoint (cacl method)");
  auto* ev_thr = ev->add_option("--threshold", ev_method.threshold, "colordeconv threshold");
  ev->add_flag("--sweep", ev_sweep, "sweep colordeconv thresholds, keep the best mean Dice");
  ev->add_flag("--soft-bce", ev_soft, "BCE from sigmoid(concentration - threshold)");
  ev->add_option("--manifest", ev_manifest, "dataset manifest")->capture_default_str();
  ev->add_option("--split", ev_split, "manifest split")->capture_default_str();
  ev->add_option("--out", ev_out, "output directory")->capture_default_str();
  ev->add_option("--dilate", ev_dilate, "dilation radius (method tag becomes cacl+morph)")
      ->capture_default_str();

  // plots
  auto* pl = app.add_subcommand("plots", "bar charts of the four metrics per method");
  std::vector<std::string> pl_reports;
  std::string pl_out = "plots";
  pl->add_option("--report", pl_reports, "report.json produced by evaluate (repeatable)")
      ->required();
  pl->add_option("--out", pl_out, "output directory")->capture_default_str();

  try {
    std::reverse(args.begin(), args.end());  // CLI11's vector overload wants reversed args
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  // flag-combination validation happens before any command touches the
  // filesystem, so a usage error never leaves partial outputs behind
  auto usage_error = [](const std::string& msg) {
    std::cerr << "usage error: " << msg << "\n";
    return 1;
  };
  if (seg->parsed()) {
    if (seg_method.name == "cacl" && seg_ck.empty())
      return usage_error("segment: --checkpoint is required for the cacl method");
    if (seg_method.name == "colordeconv" && seg_thr->count() == 0)
      return usage_error("segment: --threshold is required for the colordeconv method");
  }
  if (ev->parsed()) {
    if (ev_method.name == "cacl" && ev_ck.empty())
      return usage_error("evaluate: --checkpoint is required for the cacl method");
    if (ev_method.name == "colordeconv" && !ev_sweep && ev_thr->count() == 0)
      return usage_error("evaluate: colordeconv needs --threshold or --sweep");
  }

  try {
    if (synth->parsed()) {
      cmd_synth(synth_out, n_pos, n_neg, size, synth_seed, fractions);
    } else if (tr->parsed()) {
      cmd_train(tr_manifest, tr_out, tr_config, tr_sets,
                tr_seed_opt->count() ? std::optional<std::uint64_t>(tr_seed) : std::nullopt,
                tr_steps_opt->count() ? std::optional<int>(tr_steps) : std::nullopt, tr_resume);
    } else if (seg->parsed()) {
      seg_method.checkpoint = seg_ck;
      seg_method.threshold_set = seg_thr->count() > 0;
      cmd_segment(seg_method, seg_manifest, seg_input, seg_split, seg_out, seg_dilate, seg_overlay);
    } else if (ev->parsed()) {
      ev_method.checkpoint = ev_ck;
      ev_method.threshold_set = ev_thr->count() > 0;
      cmd_evaluate(ev_method, ev_manifest, ev_split, ev_out, ev_dilate, ev_sweep, ev_soft);
    } else if (pl->parsed()) {
      cmd_plots(pl_reports, pl_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace cacl::cli
