#include "nlms/svg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace nlms::svg {

namespace {

constexpr double kW = 640, kH = 420;
constexpr double kLeft = 80, kRight = 170, kTop = 40, kBottom = 60;

const std::array<const char*, 8> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                             "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Axis {
  double lo = 0, hi = 1;
  bool log = false;
  double map(double v) const { return log ? (std::log10(v) - lo) / (hi - lo) : (v - lo) / (hi - lo); }
  double unmap(double f) const { return log ? std::pow(10.0, lo + f * (hi - lo)) : lo + f * (hi - lo); }
};

Axis make_axis(double lo, double hi, bool log) {
  Axis a;
  a.log = log;
  if (!(lo <= hi)) lo = 0, hi = 1;
  if (log) lo = std::log10(lo), hi = std::log10(hi);
  if (hi - lo < 1e-12 * std::max(1.0, std::abs(hi))) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  a.lo = lo - pad;
  a.hi = hi + pad;
  return a;
}

bool usable(double v, bool log) { return std::isfinite(v) && (!log || v > 0); }

void header(std::ostream& out, const std::string& title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
      << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << px(kW / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
}

void frame(std::ostream& out, const Axis& ax, const Axis& ay, const std::string& xl, const std::string& yl) {
  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
  out << "<rect x=\"" << px(x0) << "\" y=\"" << px(y1) << "\" width=\"" << px(x1 - x0) << "\" height=\""
      << px(y0 - y1) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0;
    const double X = x0 + f * (x1 - x0), Y = y0 - f * (y0 - y1);
    out << "<line x1=\"" << px(X) << "\" y1=\"" << px(y0) << "\" x2=\"" << px(X) << "\" y2=\"" << px(y0 + 5)
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << px(X) << "\" y=\"" << px(y0 + 18) << "\" text-anchor=\"middle\">" << num(ax.unmap(f))
        << "</text>\n";
    out << "<line x1=\"" << px(x0 - 5) << "\" y1=\"" << px(Y) << "\" x2=\"" << px(x0) << "\" y2=\"" << px(Y)
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << px(x0 - 8) << "\" y=\"" << px(Y + 4) << "\" text-anchor=\"end\">" << num(ay.unmap(f))
        << "</text>\n";
  }
  out << "<text x=\"" << px((x0 + x1) / 2) << "\" y=\"" << px(kH - 18) << "\" text-anchor=\"middle\">" << escape(xl)
      << "</text>\n";
  out << "<text transform=\"translate(18," << px((y0 + y1) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(yl) << "</text>\n";
}

std::array<double, 3> colormap(double f) {
  // Five-stop approximation of a perceptually ordered blue-green-yellow map.
  static const std::array<std::array<double, 3>, 5> stops = {
      {{0.267, 0.005, 0.329}, {0.229, 0.322, 0.546}, {0.128, 0.567, 0.551}, {0.369, 0.789, 0.383},
       {0.993, 0.906, 0.144}}};
  f = std::clamp(f, 0.0, 1.0) * 4.0;
  const int k = std::min(3, static_cast<int>(f));
  const double t = f - k;
  std::array<double, 3> c{};
  for (int i = 0; i < 3; ++i) c[static_cast<std::size_t>(i)] =
      (1 - t) * stops[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] +
      t * stops[static_cast<std::size_t>(k + 1)][static_cast<std::size_t>(i)];
  return c;
}

std::string rgb(const std::array<double, 3>& c) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(255 * c[0])),
                static_cast<int>(std::lround(255 * c[1])), static_cast<int>(std::lround(255 * c[2])));
  return buf;
}

}  // namespace

void write_line_plot(std::ostream& out, const LinePlot& plot) {
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (const Series& s : plot.series)
    for (std::size_t k = 0; k < std::min(s.x.size(), s.y.size()); ++k) {
      if (!usable(s.x[k], plot.log_x) || !usable(s.y[k], plot.log_y)) continue;
      xlo = std::min(xlo, s.x[k]);
      xhi = std::max(xhi, s.x[k]);
      ylo = std::min(ylo, s.y[k]);
      yhi = std::max(yhi, s.y[k]);
    }
  const Axis ax = make_axis(xlo, xhi, plot.log_x), ay = make_axis(ylo, yhi, plot.log_y);
  header(out, plot.title);
  frame(out, ax, ay, plot.xlabel, plot.ylabel);
  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
  auto X = [&](double v) { return x0 + ax.map(v) * (x1 - x0); };
  auto Y = [&](double v) { return y0 - ay.map(v) * (y0 - y1); };
  for (std::size_t si = 0; si < plot.series.size(); ++si) {
    const Series& s = plot.series[si];
    const char* color = kPalette[si % kPalette.size()];
    std::string pts;
    for (std::size_t k = 0; k < std::min(s.x.size(), s.y.size()); ++k) {
      if (!usable(s.x[k], plot.log_x) || !usable(s.y[k], plot.log_y)) continue;
      pts += px(X(s.x[k])) + "," + px(Y(s.y[k])) + " ";
      if (s.markers)
        out << "<circle cx=\"" << px(X(s.x[k])) << "\" cy=\"" << px(Y(s.y[k])) << "\" r=\"3\" fill=\"" << color
            << "\"/>\n";
    }
    if (s.line && !pts.empty())
      out << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
    const double ly = kTop + 10 + 18 * static_cast<double>(si);
    out << "<line x1=\"" << px(x1 + 12) << "\" y1=\"" << px(ly) << "\" x2=\"" << px(x1 + 32) << "\" y2=\""
        << px(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << px(x1 + 38) << "\" y=\"" << px(ly + 4) << "\">" << escape(s.label) << "</text>\n";
  }
  out << "</svg>\n";
}

void write_heatmap(std::ostream& out, const Heatmap& map) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : map.values)
    if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!(lo <= hi)) lo = 0, hi = 1;
  if (hi - lo <= 0) hi = lo + 1;
  header(out, map.title);
  const Axis ax{map.x_min, map.x_max, false}, ay{map.y_min, map.y_max, false};
  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
  const double cw = (x1 - x0) / map.nx, ch = (y0 - y1) / map.ny;
  for (int j = 0; j < map.ny; ++j)
    for (int i = 0; i < map.nx; ++i) {
      const double v = map.values[static_cast<std::size_t>(j * map.nx + i)];
      if (!std::isfinite(v)) continue;
      out << "<rect x=\"" << px(x0 + i * cw) << "\" y=\"" << px(y0 - (j + 1) * ch) << "\" width=\"" << px(cw + 0.3)
          << "\" height=\"" << px(ch + 0.3) << "\" fill=\"" << rgb(colormap((v - lo) / (hi - lo))) << "\"/>\n";
    }
  frame(out, ax, ay, map.xlabel, map.ylabel);
  const int bars = 32;
  const double bx = x1 + 20, bh = (y0 - y1) / bars;
  for (int k = 0; k < bars; ++k)
    out << "<rect x=\"" << px(bx) << "\" y=\"" << px(y0 - (k + 1) * bh) << "\" width=\"16\" height=\""
        << px(bh + 0.3) << "\" fill=\"" << rgb(colormap((k + 0.5) / bars)) << "\"/>\n";
  out << "<text x=\"" << px(bx + 22) << "\" y=\"" << px(y0) << "\">" << num(lo) << "</text>\n";
  out << "<text x=\"" << px(bx + 22) << "\" y=\"" << px(y1 + 10) << "\">" << num(hi) << "</text>\n";
  out << "</svg>\n";
}

}  // namespace nlms::svg
