#pragma once

// Minimal multi-series line chart written as standalone SVG.

#include <string>
#include <vector>

namespace rsm {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;  // non-positive values are dropped on a log axis
  int width = 720;
  int height = 440;
  std::vector<Series> series;
};

std::string emit_svg(const Chart& chart);

}  // namespace rsm
