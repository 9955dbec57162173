#pragma once

#include "cacl/core.hpp"
#include "cacl/data.hpp"
#include "cacl/image_io.hpp"
#include "cacl/segmentation.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cacl {

struct ConfusionCounts {
  long long tp = 0, fp = 0, fn = 0, tn = 0;
};

inline ConfusionCounts confusion(const MaskGrid& pred, const MaskGrid& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw ShapeError("metrics: mask shapes differ");
  ConfusionCounts c;
  for (int y = 0; y < pred.rows(); ++y)
    for (int x = 0; x < pred.cols(); ++x) {
      const bool p = pred(y, x) != 0, g = gt(y, x) != 0;
      if (p && g) ++c.tp;
      else if (p && !g) ++c.fp;
      else if (!p && g) ++c.fn;
      else ++c.tn;
    }
  return c;
}

/// Dice with the degenerate all-zero ground-truth rule: an empty gt scores 1
/// against an empty prediction and 0 against anything else.
inline double dice(const MaskGrid& pred, const MaskGrid& gt) {
  const ConfusionCounts c = confusion(pred, gt);
  const long long gt_pos = c.tp + c.fn, pred_pos = c.tp + c.fp;
  if (gt_pos == 0) return pred_pos == 0 ? 1.0 : 0.0;
  return 2.0 * double(c.tp) / double(pred_pos + gt_pos);
}

/// Precision/recall under the same degenerate rule; an empty prediction
/// against a nonempty gt scores precision 0.
inline std::pair<double, double> precision_recall(const MaskGrid& pred, const MaskGrid& gt) {
  const ConfusionCounts c = confusion(pred, gt);
  const long long gt_pos = c.tp + c.fn, pred_pos = c.tp + c.fp;
  if (gt_pos == 0) {
    const double v = pred_pos == 0 ? 1.0 : 0.0;
    return {v, v};
  }
  const double precision = pred_pos == 0 ? 0.0 : double(c.tp) / double(pred_pos);
  const double recall = double(c.tp) / double(gt_pos);
  return {precision, recall};
}

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy over pixels, probabilities clamped to
/// [1e-7, 1 - 1e-7]. Binary masks are admitted as hard 0/1 probabilities.
inline double bce(const ArrXX<double>& pred_prob, const MaskGrid& gt) {
  if (pred_prob.rows() != gt.rows() || pred_prob.cols() != gt.cols())
    throw ShapeError("bce: shapes differ");
  double acc = 0.0;
  for (int y = 0; y < gt.rows(); ++y)
    for (int x = 0; x < gt.cols(); ++x) {
      const double p = std::clamp(pred_prob(y, x), kBceClamp, 1.0 - kBceClamp);
      acc += gt(y, x) ? -std::log(p) : -std::log(1.0 - p);
    }
  return acc / double(gt.rows() * gt.cols());
}

inline double bce(const MaskGrid& pred, const MaskGrid& gt) {
  const ArrXX<double> hard = pred.cast<double>();
  return bce(hard, gt);
}

struct PerImageMetrics {
  std::string id;
  double dice = 0, precision = 0, recall = 0, bce = 0;
};

struct MetricsReport {
  std::string method;
  std::string config_snapshot;
  std::vector<PerImageMetrics> per_image;
  double mean_dice = 0, mean_precision = 0, mean_recall = 0, mean_bce = 0;
  int skipped_records = 0;  // records without ground truth

  void aggregate() {
    mean_dice = mean_precision = mean_recall = mean_bce = 0;
    if (per_image.empty()) return;
    for (const auto& r : per_image) {
      mean_dice += r.dice;
      mean_precision += r.precision;
      mean_recall += r.recall;
      mean_bce += r.bce;
    }
    const double n = double(per_image.size());
    mean_dice /= n;
    mean_precision /= n;
    mean_recall /= n;
    mean_bce /= n;
  }
};

/// Prediction for one image: a binary mask, optionally with a soft
/// probability plane used for BCE instead of the hard mask.
struct SegmenterOutput {
  SegmentationMask mask;
  std::optional<ArrXX<double>> prob;
};

/// Runs a segmenter over the records of one split and aggregates the four
/// metrics. Records without a ground-truth mask are counted and skipped.
template <class S>
MetricsReport evaluate(
    const DatasetManifest& manifest, Split split,
    const std::function<SegmenterOutput(const Grid<S>&, const ManifestRecord&)>& segmenter,
    std::string method_tag, std::string config_snapshot = {}) {
  MetricsReport report;
  report.method = std::move(method_tag);
  report.config_snapshot = std::move(config_snapshot);
  for (const auto& rec : manifest.records) {
    if (rec.split != split) continue;
    if (rec.mask_path.empty()) {
      ++report.skipped_records;
      continue;
    }
    const Grid<S> image = to_grid<S>(read_png(manifest.dir / rec.path));
    const MaskGrid gt = mask_from_png(read_png(manifest.dir / rec.mask_path));
    SegmenterOutput out = segmenter(image, rec);
    PerImageMetrics m;
    m.id = rec.path;
    m.dice = dice(out.mask.pixels, gt);
    std::tie(m.precision, m.recall) = precision_recall(out.mask.pixels, gt);
    m.bce = out.prob ? bce(*out.prob, gt) : bce(out.mask.pixels, gt);
    report.per_image.push_back(std::move(m));
  }
  report.aggregate();
  return report;
}

/// One record per line plus an aggregate footer; tab-separated.
inline void save_report_text(const MetricsReport& r, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("save_report_text: cannot open " + tmp.string());
    out << "id\tdice\tprecision\trecall\tbce\n";
    out.precision(6);
    out << std::fixed;
    for (const auto& m : r.per_image)
      out << m.id << '\t' << m.dice << '\t' << m.precision << '\t' << m.recall << '\t' << m.bce
          << '\n';
    out << "aggregate(" << r.method << ")\t" << r.mean_dice << '\t' << r.mean_precision << '\t'
        << r.mean_recall << '\t' << r.mean_bce << '\n';
    if (r.skipped_records > 0)
      out << "# warning: " << r.skipped_records << " records lacked ground truth and were skipped\n";
  }
  std::filesystem::rename(tmp, path);
}

inline void save_report_json(const MetricsReport& r, const std::filesystem::path& path) {
  nlohmann::json j;
  j["method"] = r.method;
  j["config"] = r.config_snapshot;
  j["mean"] = {{"dice", r.mean_dice},
               {"precision", r.mean_precision},
               {"recall", r.mean_recall},
               {"bce", r.mean_bce}};
  j["skipped_records"] = r.skipped_records;
  auto& arr = j["per_image"] = nlohmann::json::array();
  for (const auto& m : r.per_image)
    arr.push_back({{"id", m.id},
                   {"dice", m.dice},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"bce", m.bce}});
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("save_report_json: cannot open " + tmp.string());
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline MetricsReport load_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_report_json: cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  MetricsReport r;
  r.method = j.at("method").get<std::string>();
  r.config_snapshot = j.value("config", "");
  r.mean_dice = j.at("mean").at("dice").get<double>();
  r.mean_precision = j.at("mean").at("precision").get<double>();
  r.mean_recall = j.at("mean").at("recall").get<double>();
  r.mean_bce = j.at("mean").at("bce").get<double>();
  r.skipped_records = j.value("skipped_records", 0);
  for (const auto& m : j.value("per_image", nlohmann::json::array())) {
    PerImageMetrics pm;
    pm.id = m.at("id").get<std::string>();
    pm.dice = m.at("dice").get<double>();
    pm.precision = m.at("precision").get<double>();
    pm.recall = m.at("recall").get<double>();
    pm.bce = m.at("bce").get<double>();
    r.per_image.push_back(std::move(pm));
  }
  return r;
}

}  // namespace cacl
