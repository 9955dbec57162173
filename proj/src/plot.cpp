#include "cacl/plot.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>

namespace cacl {

namespace {

// 5x7 glyphs, one byte per row, low 5 bits used, bit 4 is the left column.
const std::map<char, std::array<std::uint8_t, 7>>& font() {
  static const std::map<char, std::array<std::uint8_t, 7>> f = {
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'%', {0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13}},
      {'/', {0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
  };
  return f;
}

struct Canvas {
  PngImage img;
  Canvas(int w, int h) {
    img.w = w;
    img.h = h;
    img.channels = 3;
    img.data.assign(std::size_t(w) * h * 3, 255);
  }
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || x >= img.w || y < 0 || y >= img.h) return;
    auto* p = img.data.data() + std::size_t((y * img.w + x) * 3);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
  void fill_rect(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(x, y, r, g, b);
  }
  void text(int x, int y, const std::string& s, int scale = 1, std::uint8_t r = 0,
            std::uint8_t g = 0, std::uint8_t b = 0) {
    int cx = x;
    for (char ch : s) {
      char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      auto it = font().find(up);
      if (it == font().end()) it = font().find(' ');
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col)
          if (it->second[std::size_t(row)] & (1 << (4 - col)))
            fill_rect(cx + col * scale, y + row * scale, cx + (col + 1) * scale,
                      y + (row + 1) * scale, r, g, b);
      cx += 6 * scale;
    }
  }
};

std::string format_value(double v) {
  char buf[32];
  if (std::abs(v) >= 100 || (std::abs(v) < 0.01 && v != 0))
    std::snprintf(buf, sizeof buf, "%.3g", v);
  else
    std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

void render_bar_chart(const BarChartSpec& spec, const std::filesystem::path& out_path) {
  if (spec.labels.size() != spec.values.size())
    throw std::invalid_argument("render_bar_chart: labels/values size mismatch");
  Canvas c(spec.width, spec.height);

  const int ml = 70, mr = 20, mt = 50, mb = 60;
  const int px0 = ml, px1 = spec.width - mr, py0 = mt, py1 = spec.height - mb;

  double vmax = 0;
  for (double v : spec.values) vmax = std::max(vmax, v);
  if (vmax <= 0) vmax = 1.0;
  vmax *= 1.1;

  c.text((spec.width - int(spec.title.size()) * 12) / 2, 14, spec.title, 2);

  // gridlines + axis labels
  for (int i = 0; i <= 5; ++i) {
    const double v = vmax * i / 5.0;
    const int y = py1 - int((py1 - py0) * i / 5.0);
    for (int x = px0; x < px1; ++x) c.set(x, y, 220, 220, 220);
    c.text(6, y - 3, format_value(v));
  }
  for (int y = py0; y <= py1; ++y) c.set(px0, y, 0, 0, 0);
  for (int x = px0; x <= px1; ++x) c.set(x, py1, 0, 0, 0);

  static const std::array<std::array<std::uint8_t, 3>, 6> palette = {{{70, 120, 190},
                                                                      {200, 120, 50},
                                                                      {80, 160, 90},
                                                                      {180, 80, 80},
                                                                      {130, 100, 180},
                                                                      {120, 120, 120}}};
  const int n = static_cast<int>(spec.values.size());
  const int slot = (px1 - px0) / std::max(1, n);
  for (int i = 0; i < n; ++i) {
    const auto& col = palette[std::size_t(i) % palette.size()];
    const int bw = std::max(8, slot * 6 / 10);
    const int x0 = px0 + i * slot + (slot - bw) / 2;
    const int bh = int((py1 - py0) * std::max(0.0, spec.values[std::size_t(i)]) / vmax);
    c.fill_rect(x0, py1 - bh, x0 + bw, py1, col[0], col[1], col[2]);
    const std::string vs = format_value(spec.values[std::size_t(i)]);
    c.text(x0 + bw / 2 - int(vs.size()) * 3, py1 - bh - 12, vs);
    const std::string& lab = spec.labels[std::size_t(i)];
    c.text(px0 + i * slot + (slot - int(lab.size()) * 6) / 2, py1 + 10, lab);
  }

  write_png(out_path, c.img);
}

}  // namespace cacl
