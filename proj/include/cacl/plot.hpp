#pragma once

#include "cacl/image_io.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cacl {

/// One bar chart: one bar per (label, value), rendered to a PNG.
struct BarChartSpec {
  std::string title;
  std::vector<std::string> labels;
  std::vector<double> values;
  int width = 640;
  int height = 400;
};

void render_bar_chart(const BarChartSpec& spec, const std::filesystem::path& out_path);

}  // namespace cacl
