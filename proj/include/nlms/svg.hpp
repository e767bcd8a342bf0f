#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nlms::svg {

struct Series {
  std::string label;
  std::vector<double> x, y;
  bool markers = true;
  bool line = true;
};

struct LinePlot {
  std::string title, xlabel, ylabel;
  bool log_x = false;
  bool log_y = false;
  std::vector<Series> series;
};

// Non-finite or (on log axes) non-positive points are skipped.
void write_line_plot(std::ostream& out, const LinePlot& plot);

// values[j * nx + i] at x = x_min + (i + 1/2) (x_max - x_min) / nx, likewise y;
// NaN cells are left blank.
struct Heatmap {
  std::string title, xlabel, ylabel;
  int nx = 0, ny = 0;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  std::vector<double> values;
};

void write_heatmap(std::ostream& out, const Heatmap& map);

}  // namespace nlms::svg
