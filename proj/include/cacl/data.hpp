#pragma once

#include "cacl/core.hpp"
#include "cacl/image_io.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace cacl {

/// Knobs of the synthetic diffuse-stain dataset. Negative samples are
/// textured tissue background with cell-like blobs; positive samples add a
/// dark-brown band with a soft falloff along one image edge.
struct SyntheticConfig {
  int image_size = 64;
  int n_pos = 40;
  int n_neg = 40;

  // background texture
  std::array<double, 3> base_color = {0.91, 0.78, 0.82};  // tissue pink
  double noise_amplitude = 0.05;
  int noise_cell = 8;
  int blobs_min = 5;
  int blobs_max = 12;
  // dark warm brown, deliberately close to the stain hue: cell-like debris
  // shows up on the DAB axis in both classes, so color alone cannot separate
  // the band from the background
  std::array<double, 3> blob_color = {0.38, 0.25, 0.19};

  // stain band
  std::array<double, 3> stain_color = {0.32, 0.20, 0.10};  // dark brown
  double band_frac_min = 0.18;
  double band_frac_max = 0.32;
  double alpha_falloff = 0.5;    // fraction of the band depth that fades out
  double edge_roughness = 0.25;  // thickness modulation amplitude

  std::uint64_t seed = 0;

  void validate() const {
    if (n_pos < 1 || n_neg < 1) throw std::invalid_argument("synthetic: sample counts must be >= 1");
    if (image_size < 8) throw std::invalid_argument("synthetic: image size too small");
    auto check01 = [](const std::array<double, 3>& c, const char* name) {
      for (double v : c)
        if (v < 0.0 || v > 1.0) throw std::invalid_argument(std::string("synthetic: ") + name + " outside [0,1]");
    };
    check01(base_color, "base_color");
    check01(blob_color, "blob_color");
    check01(stain_color, "stain_color");
  }
};

struct ManifestRecord {
  std::string path;       // relative to the manifest directory
  Label label = Label::Negative;
  std::string mask_path;  // empty when absent
  Split split = Split::Train;
};

struct DatasetManifest {
  std::filesystem::path dir;
  std::vector<ManifestRecord> records;
};

namespace detail {

// bilinear value noise in [-1, 1] on a coarse lattice
inline ArrXX<double> value_noise(int h, int w, int cell, std::mt19937_64& rng) {
  const int gh = h / cell + 2, gw = w / cell + 2;
  ArrXX<double> lattice(gh, gw);
  for (int i = 0; i < lattice.size(); ++i) lattice.data()[i] = uniform<double>(rng, -1.0, 1.0);
  ArrXX<double> out(h, w);
  for (int y = 0; y < h; ++y) {
    const int gy = y / cell;
    const double fy = double(y % cell) / cell;
    for (int x = 0; x < w; ++x) {
      const int gx = x / cell;
      const double fx = double(x % cell) / cell;
      const double a = lattice(gy, gx) * (1 - fx) + lattice(gy, gx + 1) * fx;
      const double b = lattice(gy + 1, gx) * (1 - fx) + lattice(gy + 1, gx + 1) * fx;
      out(y, x) = a * (1 - fy) + b * fy;
    }
  }
  return out;
}

inline std::vector<double> value_noise_1d(int n, int cell, std::mt19937_64& rng) {
  const int gn = n / cell + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gn), 0.0);
  for (auto& v : lattice) v = uniform<double>(rng, -1.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const int g = i / cell;
    const double f = double(i % cell) / cell;
    out[std::size_t(i)] = lattice[std::size_t(g)] * (1 - f) + lattice[std::size_t(g) + 1] * f;
  }
  return out;
}

inline std::array<double, 3> jitter(std::array<double, 3> c, double amp, std::mt19937_64& rng) {
  for (auto& v : c) v = std::clamp(v + uniform<double>(rng, -amp, amp), 0.0, 1.0);
  return c;
}

// One synthetic patch plus its stain-alpha field (all zero for negatives).
inline std::pair<Grid<double>, ArrXX<double>> render_sample(const SyntheticConfig& cfg,
                                                            bool positive,
                                                            std::mt19937_64& rng) {
  const int n = cfg.image_size;
  Grid<double> img(3, n, n);
  const auto base = jitter(cfg.base_color, 0.03, rng);
  const ArrXX<double> tex = value_noise(n, n, cfg.noise_cell, rng);
  const ArrXX<double> fine = value_noise(n, n, std::max(2, cfg.noise_cell / 3), rng);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double t = cfg.noise_amplitude * (tex(y, x) + 0.5 * fine(y, x));
      img.at(0, y, x) = std::clamp(base[0] + t, 0.0, 1.0);
      img.at(1, y, x) = std::clamp(base[1] + t * 0.9, 0.0, 1.0);
      img.at(2, y, x) = std::clamp(base[2] + t * 0.95, 0.0, 1.0);
    }

  // cell-like blobs appear in both classes
  const int blobs = uniform_int(rng, cfg.blobs_min, cfg.blobs_max);
  for (int bi = 0; bi < blobs; ++bi) {
    const double cy = uniform<double>(rng, 0.0, double(n));
    const double cx = uniform<double>(rng, 0.0, double(n));
    const double ry = uniform<double>(rng, 2.0, std::max(3.0, n / 14.0));
    const double rx = uniform<double>(rng, 2.0, std::max(3.0, n / 14.0));
    const auto col = jitter(cfg.blob_color, 0.06, rng);
    const int y0 = std::max(0, int(cy - ry - 2)), y1 = std::min(n, int(cy + ry + 3));
    const int x0 = std::max(0, int(cx - rx - 2)), x1 = std::min(n, int(cx + rx + 3));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        const double e = dy * dy + dx * dx;
        const double a = 0.8 * std::clamp((1.0 - e) / 0.35, 0.0, 1.0);
        if (a <= 0) continue;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = (1 - a) * img.at(c, y, x) + a * col[std::size_t(c)];
      }
  }

  ArrXX<double> alpha = ArrXX<double>::Zero(n, n);
  if (positive) {
    const int edge = uniform_int(rng, 0, 3);  // 0 top, 1 bottom, 2 left, 3 right
    const double thickness = n * uniform<double>(rng, cfg.band_frac_min, cfg.band_frac_max);
    const auto rough = value_noise_1d(n, std::max(2, n / 8), rng);
    const ArrXX<double> grain = value_noise(n, n, std::max(2, cfg.noise_cell / 2), rng);
    const double strength = uniform<double>(rng, 0.75, 0.95);
    const auto stain = jitter(cfg.stain_color, 0.04, rng);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        int d, u;
        switch (edge) {
          case 0: d = y; u = x; break;
          case 1: d = n - 1 - y; u = x; break;
          case 2: d = x; u = y; break;
          default: d = n - 1 - x; u = y; break;
        }
        const double t_local =
            std::max(2.0, thickness * (1.0 + cfg.edge_roughness * rough[std::size_t(u)]));
        const double soft = std::max(1.0, cfg.alpha_falloff * t_local);
        double a = std::clamp((t_local - d) / soft, 0.0, 1.0);
        a *= std::clamp(1.0 + 0.18 * grain(y, x), 0.0, 1.0);  // diffuse granularity
        alpha(y, x) = std::clamp(a, 0.0, 1.0);
        const double blend = strength * alpha(y, x);
        if (blend <= 0) continue;
        for (int c = 0; c < 3; ++c)
          img.at(c, y, x) = (1 - blend) * img.at(c, y, x) + blend * stain[std::size_t(c)];
      }
  }
  return {std::move(img), std::move(alpha)};
}

}  // namespace detail

/// Generates the dataset under out_dir (images/ and masks/ subdirectories)
/// and returns the manifest. Ground truth marks pixels whose stain alpha
/// exceeds 0.5; negative masks are all zero. Deterministic per seed, sample
/// by sample.
inline DatasetManifest generate_synthetic(const SyntheticConfig& cfg,
                                          const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (!std::filesystem::is_directory(out_dir / "images") ||
      !std::filesystem::is_directory(out_dir / "masks"))
    throw std::runtime_error("generate_synthetic: cannot create output directories under " +
                             out_dir.string());

  DatasetManifest manifest;
  manifest.dir = out_dir;
  const int total = cfg.n_pos + cfg.n_neg;
  for (int i = 0; i < total; ++i) {
    const bool positive = i < cfg.n_pos;
    std::seed_seq ss{cfg.seed, std::uint64_t(i), std::uint64_t(positive ? 1 : 0)};
    std::mt19937_64 rng(ss);
    auto [img, alpha] = detail::render_sample(cfg, positive, rng);

    MaskGrid gt(cfg.image_size, cfg.image_size);
    for (int y = 0; y < cfg.image_size; ++y)
      for (int x = 0; x < cfg.image_size; ++x) gt(y, x) = alpha(y, x) > 0.5 ? 1 : 0;

    char name[64];
    std::snprintf(name, sizeof name, "%s_%04d.png", positive ? "pos" : "neg",
                  positive ? i : i - cfg.n_pos);
    const std::string img_rel = std::string("images/") + name;
    const std::string mask_rel = std::string("masks/") + name;
    write_png(out_dir / img_rel, to_png_rgb(img));
    write_png(out_dir / mask_rel, to_png_gray(gt));
    manifest.records.push_back(
        {img_rel, positive ? Label::Positive : Label::Negative, mask_rel, Split::Train});
  }
  return manifest;
}

template <class S>
struct TilePatch {
  Grid<S> pixels;
  int y = 0;
  int x = 0;
};

/// Row-major sliding window; trailing partial windows are dropped.
template <class S>
std::vector<TilePatch<S>> tile_image(const Grid<S>& image, int patch, int stride) {
  if (patch < 1 || patch > std::min(image.h, image.w))
    throw std::invalid_argument("tile_image: patch must satisfy 1 <= patch <= min(H, W)");
  if (stride < 1) throw std::invalid_argument("tile_image: stride must be >= 1");
  std::vector<TilePatch<S>> out;
  for (int y = 0; y + patch <= image.h; y += stride) {
    for (int x = 0; x + patch <= image.w; x += stride) {
      TilePatch<S> t;
      t.y = y;
      t.x = x;
      t.pixels = Grid<S>(image.channels(), patch, patch);
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) t.pixels.pixel(py, px) = image.pixel(y + py, x + px);
      out.push_back(std::move(t));
    }
  }
  return out;
}

/// Stratified deterministic split. Fractions must sum to 1 (within 1e-9);
/// each label group is shuffled with the seed and cut by cumulative rounding,
/// which keeps per-split label ratios within one record of the global ratio.
inline DatasetManifest split_manifest(DatasetManifest manifest, std::array<double, 3> fractions,
                                      std::uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_manifest: fractions must sum to 1");
  for (double f : fractions)
    if (f < 0) throw std::invalid_argument("split_manifest: fractions must be >= 0");

  std::mt19937_64 rng(seed);
  for (Label lab : {Label::Positive, Label::Negative}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].label == lab) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const int n = static_cast<int>(idx.size());
    int c1 = static_cast<int>(std::llround(fractions[0] * n));
    int c2 = static_cast<int>(std::llround((fractions[0] + fractions[1]) * n));
    c1 = std::clamp(c1, 0, n);
    c2 = std::clamp(c2, c1, n);
    for (int i = 0; i < n; ++i)
      manifest.records[idx[std::size_t(i)]].split =
          i < c1 ? Split::Train : (i < c2 ? Split::Val : Split::Test);
  }
  return manifest;
}

inline Label parse_label(const std::string& s) {
  if (s == "positive") return Label::Positive;
  if (s == "negative") return Label::Negative;
  throw std::runtime_error("manifest: bad label '" + s + "'");
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::runtime_error("manifest: bad split '" + s + "'");
}

/// Tab-separated, one record per line, header first. mask_path "-" = none.
inline void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("save_manifest: cannot open " + tmp.string());
    out << "path\tlabel\tmask_path\tsplit\n";
    for (const auto& r : manifest.records)
      out << r.path << '\t' << to_string(r.label) << '\t'
          << (r.mask_path.empty() ? "-" : r.mask_path) << '\t' << to_string(r.split) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path.string());
  DatasetManifest manifest;
  manifest.dir = path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_manifest: empty file " + path.string());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string p, lab, mask, split;
    if (!std::getline(ss, p, '\t') || !std::getline(ss, lab, '\t') ||
        !std::getline(ss, mask, '\t') || !std::getline(ss, split, '\t'))
      throw std::runtime_error("load_manifest: malformed line: " + line);
    ManifestRecord r;
    r.path = p;
    r.label = parse_label(lab);
    r.mask_path = mask == "-" ? "" : mask;
    r.split = parse_split(split);
    if (!std::filesystem::exists(manifest.dir / r.path))
      throw std::runtime_error("load_manifest: missing image " + (manifest.dir / r.path).string());
    if (!r.mask_path.empty() && !std::filesystem::exists(manifest.dir / r.mask_path))
      throw std::runtime_error("load_manifest: missing mask " + (manifest.dir / r.mask_path).string());
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

}  // namespace cacl
