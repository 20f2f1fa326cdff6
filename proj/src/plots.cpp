#include "graftkd/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "graftkd/tensor.hpp"

namespace graftkd {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string num(double v) {
  if (!std::isfinite(v)) return "0";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

struct Range {
  double lo = 0.0, hi = 1.0;
  void expand(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
};

}  // namespace

void write_svg_chart(const std::string& path, const std::string& title,
                     const std::string& xlabel, const std::string& ylabel,
                     const std::vector<PlotSeries>& series) {
  require(!series.empty(), "plot: no series");
  const double W = 640, H = 440, ml = 64, mr = 20, mt = 40, mb = 52;
  const double pw = W - ml - mr, ph = H - mt - mb;

  bool first = true;
  Range xr, yr;
  for (const auto& s : series) {
    require(s.x.size() == s.y.size(), "plot: x/y size mismatch in series " + s.label);
    require(s.yerr.empty() || s.yerr.size() == s.y.size(),
            "plot: yerr size mismatch in series " + s.label);
    for (size_t i = 0; i < s.x.size(); ++i) {
      const double e = s.yerr.empty() ? 0.0 : s.yerr[i];
      if (first) {
        xr.lo = xr.hi = s.x[i];
        yr.lo = s.y[i] - e;
        yr.hi = s.y[i] + e;
        first = false;
      } else {
        xr.expand(s.x[i]);
        yr.expand(s.y[i] - e);
        yr.expand(s.y[i] + e);
      }
    }
  }
  require(!first, "plot: all series empty");
  if (xr.hi == xr.lo) xr.hi = xr.lo + 1.0;
  if (yr.hi == yr.lo) yr.hi = yr.lo + 1.0;
  const double ypad = 0.05 * (yr.hi - yr.lo);
  yr.lo -= ypad;
  yr.hi += ypad;

  auto px = [&](double x) { return ml + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto py = [&](double y) { return mt + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
      << "</text>\n";

  // axes + ticks
  svg << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
  const int nticks = 5;
  for (int i = 0; i <= nticks; ++i) {
    const double fx = xr.lo + (xr.hi - xr.lo) * i / nticks;
    const double fy = yr.lo + (yr.hi - yr.lo) * i / nticks;
    svg << "<line x1=\"" << num(px(fx)) << "\" y1=\"" << mt + ph << "\" x2=\"" << num(px(fx))
        << "\" y2=\"" << mt + ph + 5 << "\" stroke=\"#333\"/>\n";
    svg << "<text x=\"" << num(px(fx)) << "\" y=\"" << mt + ph + 18
        << "\" text-anchor=\"middle\">" << num(fx) << "</text>\n";
    svg << "<line x1=\"" << ml - 5 << "\" y1=\"" << num(py(fy)) << "\" x2=\"" << ml << "\" y2=\""
        << num(py(fy)) << "\" stroke=\"#333\"/>\n";
    svg << "<text x=\"" << ml - 8 << "\" y=\"" << num(py(fy) + 4)
        << "\" text-anchor=\"end\">" << num(fy) << "</text>\n";
  }
  svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  svg << "<text x=\"16\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << mt + ph / 2 << ")\">" << ylabel
      << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    if (!s.yerr.empty()) {
      for (size_t i = 0; i < s.x.size(); ++i) {
        if (s.yerr[i] <= 0) continue;
        const double x = px(s.x[i]);
        const double y0 = py(s.y[i] - s.yerr[i]), y1 = py(s.y[i] + s.yerr[i]);
        svg << "<line x1=\"" << num(x) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x)
            << "\" y2=\"" << num(y1) << "\" stroke=\"" << color << "\"/>\n";
        svg << "<line x1=\"" << num(x - 4) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x + 4)
            << "\" y2=\"" << num(y0) << "\" stroke=\"" << color << "\"/>\n";
        svg << "<line x1=\"" << num(x - 4) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x + 4)
            << "\" y2=\"" << num(y1) << "\" stroke=\"" << color << "\"/>\n";
      }
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (i) svg << " ";
      svg << num(px(s.x[i])) << "," << num(py(s.y[i]));
    }
    svg << "\"/>\n";
    for (size_t i = 0; i < s.x.size(); ++i) {
      svg << "<circle cx=\"" << num(px(s.x[i])) << "\" cy=\"" << num(py(s.y[i]))
          << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    const double ly = mt + 14 + 16 * static_cast<double>(si);
    svg << "<line x1=\"" << ml + pw - 120 << "\" y1=\"" << num(ly - 4) << "\" x2=\""
        << ml + pw - 100 << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << ml + pw - 94 << "\" y=\"" << num(ly) << "\">" << s.label
        << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream f(path, std::ios::binary);
  require(f.good(), "plot: cannot open " + path);
  f << svg.str();
  require(f.good(), "plot: write failed " + path);
}

}  // namespace graftkd
