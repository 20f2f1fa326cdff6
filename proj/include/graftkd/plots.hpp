#pragma once

#include <string>
#include <vector>

namespace graftkd {

// One polyline; yerr, when non-empty, draws symmetric error bars.
struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> yerr;
};

// Deterministic SVG line chart: identical inputs produce identical bytes.
void write_svg_chart(const std::string& path, const std::string& title,
                     const std::string& xlabel, const std::string& ylabel,
                     const std::vector<PlotSeries>& series);

}  // namespace graftkd
