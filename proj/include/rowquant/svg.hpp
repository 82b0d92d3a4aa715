#ifndef ROWQUANT_SVG_HPP
#define ROWQUANT_SVG_HPP

#include <string>
#include <utility>
#include <vector>

namespace rowquant {

struct SvgSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Self-contained SVG line chart (no plotting dependency).
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<SvgSeries>& series);

}  // namespace rowquant

#endif  // ROWQUANT_SVG_HPP
