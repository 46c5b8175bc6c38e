#include "stagin/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stagin::svg {

namespace {

struct Rgb {
  int r, g, b;
};

// compact viridis-like ramp, linearly interpolated between anchor stops
Rgb colormap(double t) {
  static const Rgb stops[5] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98},
                               {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  int lo = std::min(3, static_cast<int>(t));
  double f = t - lo;
  auto mix = [f](int a, int b) { return static_cast<int>(std::lround(a + f * (b - a))); };
  return {mix(stops[lo].r, stops[lo + 1].r), mix(stops[lo].g, stops[lo + 1].g),
          mix(stops[lo].b, stops[lo + 1].b)};
}

std::ofstream open_svg(const std::string& path, int w, int h) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("svg: cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  out << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  return out;
}

void title_text(std::ofstream& out, int w, const std::string& title) {
  out << "<text x=\"" << w / 2 << "\" y=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\""
      << " font-size=\"13\">" << title << "</text>\n";
}

}  // namespace

void heatmap(const Mat& values, const std::string& title, const std::string& path) {
  if (values.rows == 0 || values.cols == 0) throw std::invalid_argument("heatmap: empty matrix");
  const int cell = std::max(1, 512 / std::max(values.rows, values.cols));
  const int margin = 24;
  int w = values.cols * cell + 2 * margin;
  int h = values.rows * cell + 2 * margin;
  double lo = values.d[0], hi = values.d[0];
  for (double v : values.d) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double span = hi > lo ? hi - lo : 1.0;
  auto out = open_svg(path, w, h);
  title_text(out, w, title);
  for (int i = 0; i < values.rows; ++i)
    for (int j = 0; j < values.cols; ++j) {
      Rgb c = colormap((values(i, j) - lo) / span);
      out << "<rect x=\"" << margin + j * cell << "\" y=\"" << margin + i * cell << "\" width=\""
          << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << c.r << "," << c.g << "," << c.b
          << ")\"/>\n";
    }
  out << "</svg>\n";
}

void line_plot(const std::vector<double>& values, const std::string& title,
               const std::string& path) {
  if (values.empty()) throw std::invalid_argument("line_plot: no values");
  const int w = 640, h = 240, margin = 32;
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double span = hi > lo ? hi - lo : 1.0;
  auto out = open_svg(path, w, h);
  title_text(out, w, title);
  std::ostringstream pts;
  for (size_t i = 0; i < values.size(); ++i) {
    double x = margin + (w - 2.0 * margin) * (values.size() == 1 ? 0.5 : static_cast<double>(i) /
                                                                             (values.size() - 1));
    double y = h - margin - (h - 2.0 * margin) * (values[i] - lo) / span;
    pts << (i ? " " : "") << x << "," << y;
  }
  out << "<polyline points=\"" << pts.str()
      << "\" fill=\"none\" stroke=\"rgb(33,102,172)\" stroke-width=\"1.5\"/>\n";
  out << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\"" << w - margin
      << "\" y2=\"" << h - margin << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  out << "</svg>\n";
}

void bar_plot(const std::vector<std::string>& labels, const std::vector<double>& values,
              const std::string& title, const std::string& path) {
  if (labels.size() != values.size() || values.empty())
    throw std::invalid_argument("bar_plot: labels and values must match and be nonempty");
  const int w = 640, h = 280, margin = 40;
  double hi = *std::max_element(values.begin(), values.end());
  if (hi <= 0) hi = 1.0;
  auto out = open_svg(path, w, h);
  title_text(out, w, title);
  double band = (w - 2.0 * margin) / static_cast<double>(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    double bh = (h - 2.0 * margin) * values[i] / hi;
    double x = margin + band * static_cast<double>(i) + band * 0.15;
    out << "<rect x=\"" << x << "\" y=\"" << h - margin - bh << "\" width=\"" << band * 0.7
        << "\" height=\"" << bh << "\" fill=\"rgb(33,145,140)\"/>\n";
    out << "<text x=\"" << x + band * 0.35 << "\" y=\"" << h - margin + 14
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << labels[i]
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace stagin::svg
