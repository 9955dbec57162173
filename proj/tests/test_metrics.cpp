#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cacl/metrics.hpp"
#include "cacl/data.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace cacl;
namespace fs = std::filesystem;

namespace {

MaskGrid random_mask(int h, int w, std::mt19937_64& rng, int denom = 2) {
  MaskGrid m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m(y, x) = std::uint8_t(uniform_int(rng, 0, denom - 1) == 0);
  return m;
}

}  // namespace

TEST_CASE("dice identity, degenerate rule, counting oracle") {
  std::mt19937_64 rng(1);
  MaskGrid a = random_mask(6, 6, rng);
  a(0, 0) = 1;  // nonempty
  CHECK(dice(a, a) == 1.0);

  MaskGrid zero = MaskGrid::Zero(6, 6);
  CHECK(dice(zero, zero) == 1.0);
  CHECK(dice(a, zero) == 0.0);

  for (int t = 0; t < 50; ++t) {
    MaskGrid pred = random_mask(8, 8, rng);
    MaskGrid gt = random_mask(8, 8, rng);
    long long tp = 0, np = 0, ng = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        tp += pred(y, x) && gt(y, x);
        np += pred(y, x) != 0;
        ng += gt(y, x) != 0;
      }
    const double expect = ng == 0 ? (np == 0 ? 1.0 : 0.0) : 2.0 * double(tp) / double(np + ng);
    CHECK(dice(pred, gt) == expect);
    if (ng > 0 && np > 0) CHECK(dice(pred, gt) == dice(gt, pred));
  }

  MaskGrid small = MaskGrid::Zero(3, 3);
  CHECK_THROWS_AS(dice(a, small), ShapeError);
}

TEST_CASE("precision/recall subset case, degenerate rule, confusion oracle") {
  MaskGrid gt = MaskGrid::Zero(4, 4);
  gt.block(0, 0, 2, 4).setConstant(1);
  MaskGrid pred = MaskGrid::Zero(4, 4);
  pred.block(0, 0, 1, 4).setConstant(1);  // strict subset of gt
  auto [p, r] = precision_recall(pred, gt);
  CHECK(p == 1.0);
  CHECK(r < 1.0);
  CHECK(r == doctest::Approx(0.5));

  MaskGrid zero = MaskGrid::Zero(4, 4);
  auto [pz, rz] = precision_recall(zero, zero);
  CHECK(pz == 1.0);
  CHECK(rz == 1.0);
  auto [pn, rn] = precision_recall(pred, zero);
  CHECK(pn == 0.0);
  CHECK(rn == 0.0);
  auto [pe, re] = precision_recall(zero, gt);  // empty pred, nonempty gt
  CHECK(pe == 0.0);
  CHECK(re == 0.0);

  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    MaskGrid a = random_mask(5, 7, rng);
    MaskGrid b = random_mask(5, 7, rng);
    long long tp = 0, fp = 0, fn = 0;
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 7; ++x) {
        tp += a(y, x) && b(y, x);
        fp += a(y, x) && !b(y, x);
        fn += !a(y, x) && b(y, x);
      }
    auto [pp, rr] = precision_recall(a, b);
    if (tp + fn == 0) continue;  // degenerate covered above
    CHECK(pp == (tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp)));
    CHECK(rr == double(tp) / double(tp + fn));
    // harmonic-mean identity against dice
    if (tp > 0)
      CHECK(dice(a, b) == doctest::Approx(2 * pp * rr / (pp + rr)).epsilon(1e-12));
  }
}

TEST_CASE("bce anchors and summation oracle") {
  std::mt19937_64 rng(3);
  MaskGrid gt = random_mask(4, 4, rng);

  CHECK(bce(gt, gt) < 1e-6);  // clamped perfect prediction

  ArrXX<double> half = ArrXX<double>::Constant(4, 4, 0.5);
  CHECK(bce(half, gt) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  MaskGrid other = random_mask(4, 4, rng);
  CHECK(bce(half, other) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  ArrXX<double> prob(4, 4);
  for (int i = 0; i < prob.size(); ++i) prob.data()[i] = uniform<double>(rng, 0.0, 1.0);
  double acc = 0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double p = std::clamp(prob(y, x), 1e-7, 1.0 - 1e-7);
      acc += gt(y, x) ? -std::log(p) : -std::log(1.0 - p);
    }
  CHECK(bce(prob, gt) == doctest::Approx(acc / 16.0).epsilon(1e-12));

  ArrXX<double> bad(3, 3);
  CHECK_THROWS_AS(bce(bad, gt), ShapeError);
}

TEST_CASE("evaluate aggregates per-image metrics over a manifest split") {
  auto dir = fs::temp_directory_path() / "cacl_test_eval";
  fs::remove_all(dir);
  SyntheticConfig cfg;
  cfg.image_size = 32;
  cfg.n_pos = 3;
  cfg.n_neg = 3;
  cfg.seed = 5;
  auto manifest = generate_synthetic(cfg, dir);
  for (auto& r : manifest.records) r.split = Split::Test;

  // oracle segmenter: returns the ground truth itself
  std::function<SegmenterOutput(const Grid<double>&, const ManifestRecord&)> perfect =
      [&](const Grid<double>&, const ManifestRecord& rec) {
        SegmenterOutput out;
        out.mask.pixels = mask_from_png(read_png(dir / rec.mask_path));
        return out;
      };
  auto report = evaluate<double>(manifest, Split::Test, perfect, "cacl");
  CHECK(report.per_image.size() == 6);
  CHECK(report.mean_dice == 1.0);
  CHECK(report.mean_precision == 1.0);
  CHECK(report.mean_recall == 1.0);
  CHECK(report.mean_bce < 1e-6);

  // deterministic
  auto report2 = evaluate<double>(manifest, Split::Test, perfect, "cacl");
  CHECK(report2.mean_dice == report.mean_dice);
  for (std::size_t i = 0; i < report.per_image.size(); ++i)
    CHECK(report.per_image[i].dice == report2.per_image[i].dice);

  // records without ground truth are skipped and counted
  auto with_missing = manifest;
  with_missing.records[0].mask_path.clear();
  auto partial = evaluate<double>(with_missing, Split::Test, perfect, "cacl");
  CHECK(partial.skipped_records == 1);
  CHECK(partial.per_image.size() == 5);

  // dilated predictions can only increase recall on nonempty ground truth
  std::function<SegmenterOutput(const Grid<double>&, const ManifestRecord&)> blocky =
      [&](const Grid<double>&, const ManifestRecord& rec) {
        SegmenterOutput out;
        MaskGrid gt = mask_from_png(read_png(dir / rec.mask_path));
        out.mask.pixels = MaskGrid::Zero(gt.rows(), gt.cols());
        // mimic an under-predicting model: erode the gt to its top rows
        for (int y = 0; y + 1 < gt.rows(); ++y)
          for (int x = 0; x < gt.cols(); ++x)
            out.mask.pixels(y, x) = gt(y, x) && gt(y + 1, x);
        return out;
      };
  std::function<SegmenterOutput(const Grid<double>&, const ManifestRecord&)> blocky_dilated =
      [&](const Grid<double>& img, const ManifestRecord& rec) {
        SegmenterOutput out = blocky(img, rec);
        out.mask = dilate(out.mask, 1);
        return out;
      };
  auto plain = evaluate<double>(manifest, Split::Test, blocky, "cacl");
  auto morph = evaluate<double>(manifest, Split::Test, blocky_dilated, "cacl+morph");
  for (std::size_t i = 0; i < plain.per_image.size(); ++i) {
    const bool positive = plain.per_image[i].id.find("pos") != std::string::npos;
    if (positive) CHECK(morph.per_image[i].recall >= plain.per_image[i].recall);
  }
}

TEST_CASE("report serialization round-trips through JSON and writes text") {
  MetricsReport r;
  r.method = "cacl+morph";
  r.config_snapshot = "seed = 7";
  r.per_image = {{"images/a.png", 0.5, 0.625, 0.75, 0.125}, {"images/b.png", 1.0, 1.0, 1.0, 0.0}};
  r.skipped_records = 2;
  r.aggregate();
  CHECK(r.mean_dice == doctest::Approx(0.75));

  auto dir = fs::temp_directory_path() / "cacl_test_report";
  fs::create_directories(dir);
  save_report_json(r, dir / "report.json");
  auto back = load_report_json(dir / "report.json");
  CHECK(back.method == r.method);
  CHECK(back.mean_dice == r.mean_dice);
  CHECK(back.per_image.size() == 2);
  CHECK(back.per_image[1].recall == 1.0);
  CHECK(back.skipped_records == 2);

  save_report_text(r, dir / "report.tsv");
  std::ifstream in(dir / "report.tsv");
  std::string first;
  std::getline(in, first);
  CHECK(first == "id\tdice\tprecision\trecall\tbce");
}
