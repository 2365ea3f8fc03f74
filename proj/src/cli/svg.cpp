// SPDX-License-Identifier: Apache-2.0
#include "kunbr/cli/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"

namespace kunbr::cli {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 150, kTop = 50, kBottom = 60;
constexpr const char* kPalette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1", "#edc948"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Axis {
  double lo = 0, hi = 1;
  double y(double v) const { return kTop + (hi - v) / (hi - lo) * (kHeight - kTop - kBottom); }
};

Axis fit_axis(const std::vector<Series>& series) {
  double lo = 0, hi = 0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double e = i < s.errors.size() ? s.errors[i] : 0.0;
      lo = std::min(lo, s.values[i] - e);
      hi = std::max(hi, s.values[i] + e);
    }
  }
  if (hi - lo < 1e-12) hi = lo + 1;
  const double step = std::pow(10.0, std::floor(std::log10((hi - lo) / 5)));
  return {std::floor(lo / step) * step, std::ceil(hi / step) * step};
}

void check_lengths(const std::vector<Series>& series, std::size_t n) {
  for (const auto& s : series) {
    if (s.values.size() != n) {
      throw ShapeError(fmt::format("chart series '{}' has {} values for {} positions", s.name, s.values.size(), n));
    }
    if (!s.errors.empty() && s.errors.size() != n) {
      throw ShapeError(fmt::format("chart series '{}' has {} error bars for {} positions", s.name, s.errors.size(), n));
    }
  }
}

std::string frame(const std::string& title, const std::string& y_label, const Axis& axis) {
  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"28\" font-size=\"16\" text-anchor=\"middle\">{3}</text>\n",
      kWidth, kHeight, (kLeft + kWidth - kRight) / 2, escape(title));
  const double step = (axis.hi - axis.lo) / 5;
  for (int i = 0; i <= 5; ++i) {
    const double v = axis.lo + i * step;
    const double y = axis.y(v);
    out += fmt::format("<line x1=\"{}\" y1=\"{:.1f}\" x2=\"{}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n", kLeft, y,
                       kWidth - kRight, y);
    out += fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{:.4g}</text>\n", kLeft - 6, y + 4, v);
  }
  out += fmt::format("<line x1=\"{0}\" y1=\"{1:.1f}\" x2=\"{2}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n", kLeft,
                     axis.y(std::clamp(0.0, axis.lo, axis.hi)), kWidth - kRight);
  out += fmt::format("<text transform=\"translate(18,{:.1f}) rotate(-90)\" text-anchor=\"middle\">{}</text>\n",
                     (kTop + kHeight - kBottom) / 2, escape(y_label));
  return out;
}

std::string legend(const std::vector<Series>& series) {
  std::string out;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = kTop + 20.0 * s;
    out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n", kWidth - kRight + 16, y,
                       kPalette[s % std::size(kPalette)]);
    out += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", kWidth - kRight + 34, y + 10, escape(series[s].name));
  }
  return out;
}

}  // namespace

std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& categories, const std::vector<Series>& series) {
  check_lengths(series, categories.size());
  const Axis axis = fit_axis(series);
  std::string out = frame(title, y_label, axis);
  const double plot = kWidth - kLeft - kRight;
  const double group = categories.empty() ? plot : plot / static_cast<double>(categories.size());
  const double bar = 0.8 * group / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  const double zero = axis.y(std::clamp(0.0, axis.lo, axis.hi));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double x0 = kLeft + group * c + 0.1 * group;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = series[s].values[c];
      const double y = axis.y(v);
      const double x = x0 + bar * s;
      out += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\"><title>{} {}: {:.2f}</title></rect>\n",
                         x, std::min(y, zero), bar, std::abs(zero - y), kPalette[s % std::size(kPalette)],
                         escape(categories[c]), escape(series[s].name), v);
      if (!series[s].errors.empty()) {
        const double e = series[s].errors[c];
        const double cx = x + bar / 2;
        out += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", cx,
                           axis.y(v - e), axis.y(v + e));
      }
    }
    out += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", kLeft + group * (c + 0.5),
                       kHeight - kBottom + 18, escape(categories[c]));
  }
  out += legend(series);
  out += "</svg>\n";
  return out;
}

std::string line_chart_svg(const std::string& title, const std::string& y_label,
                           const std::vector<std::string>& x_labels, const std::vector<Series>& series) {
  check_lengths(series, x_labels.size());
  const Axis axis = fit_axis(series);
  std::string out = frame(title, y_label, axis);
  const double plot = kWidth - kLeft - kRight;
  const auto x_at = [&](std::size_t i) {
    return x_labels.size() < 2 ? kLeft + plot / 2 : kLeft + 20 + (plot - 40) * i / static_cast<double>(x_labels.size() - 1);
  };
  for (std::size_t i = 0; i < x_labels.size(); ++i) {
    out += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x_at(i),
                       kHeight - kBottom + 18, escape(x_labels[i]));
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < x_labels.size(); ++i) {
      points += fmt::format("{}{:.1f},{:.1f}", i ? " " : "", x_at(i), axis.y(series[s].values[i]));
    }
    out += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n", points, color);
    for (std::size_t i = 0; i < x_labels.size(); ++i) {
      out += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"3\" fill=\"{}\"/>\n", x_at(i),
                         axis.y(series[s].values[i]), color);
    }
  }
  out += legend(series);
  out += "</svg>\n";
  return out;
}

}  // namespace kunbr::cli
