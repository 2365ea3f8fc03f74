// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace kunbr::cli {

struct Series {
  std::string name;
  std::vector<double> values;  // one per category / x position
  std::vector<double> errors;  // optional, same length as values
};

// Grouped bars: one group per category, one bar per series.
std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& categories, const std::vector<Series>& series);

// One polyline per series over shared x labels.
std::string line_chart_svg(const std::string& title, const std::string& y_label,
                           const std::vector<std::string>& x_labels, const std::vector<Series>& series);

}  // namespace kunbr::cli
