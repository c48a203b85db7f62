#include "sedlab/svg.hpp"

#include "sedlab/csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace sedlab::svg {

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  // Two decimals are plenty for pixel coordinates.
  return format_real(std::round(v * 100.0) / 100.0);
}

std::ofstream open(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  return out;
}

const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

}  // namespace

void line_chart(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series,
                const std::string& x_label, const std::string& y_label) {
  constexpr double width = 640, height = 400, left = 60, right = 150, top = 40, bottom = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) {
      throw std::invalid_argument("line_chart: series '" + s.name + "' has mismatched x/y lengths");
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) {
    x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };

  auto out = open(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
      << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double fx = x0 + (x1 - x0) * t / 4.0, fy = y0 + (y1 - y0) * t / 4.0;
    out << "<text x=\"" << num(px(fx)) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << num(fx)
        << "</text>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << num(py(fy) + 4) << "\" text-anchor=\"end\">" << num(fy)
        << "</text>\n";
  }
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">" << escape(x_label)
      << "</text>\n";
  out << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << top + ph / 2 << ")\">" << escape(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = palette[s % std::size(palette)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      out << (i ? " " : "") << num(px(series[s].x[i])) << ',' << num(py(series[s].y[i]));
    }
    out << "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(s);
    out << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 30 << "\" y2=\""
        << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly << "\">" << escape(series[s].name) << "</text>\n";
  }
  out << "</svg>\n";
}

void heatmap(const std::filesystem::path& path, const std::string& title, const std::vector<std::vector<double>>& rows,
             const std::vector<std::vector<std::string>>& cell_labels) {
  constexpr double cell = 14, left = 40, top = 36;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
  }
  const double width = left + cell * static_cast<double>(cols) + 20;
  const double height = top + cell * static_cast<double>(rows.size()) + 20;
  auto out = open(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
      << "\" font-family=\"monospace\" font-size=\"10\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\" font-family=\"sans-serif\">" << escape(title)
      << "</text>\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double y = top + cell * static_cast<double>(r);
    out << "<text x=\"" << left - 4 << "\" y=\"" << num(y + 10) << "\" text-anchor=\"end\">" << r << "</text>\n";
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const double v = std::clamp(rows[r][c], 0.0, 1.0);
      const int red = static_cast<int>(std::lround(255 * (1 - v)));
      const int green = static_cast<int>(std::lround(255 - 155 * v));
      const double x = left + cell * static_cast<double>(c);
      out << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"rgb(" << red << ',' << green << ",255)\"><title>" << format_real(rows[r][c])
          << "</title></rect>\n";
      if (r < cell_labels.size() && c < cell_labels[r].size()) {
        out << "<text x=\"" << num(x + cell / 2) << "\" y=\"" << num(y + 10) << "\" text-anchor=\"middle\">"
            << escape(cell_labels[r][c]) << "</text>\n";
      }
    }
  }
  out << "</svg>\n";
}

}  // namespace sedlab::svg
