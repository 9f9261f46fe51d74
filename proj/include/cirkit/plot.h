#pragma once

#include <string>
#include <vector>

namespace cirkit {

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

// Static SVG line chart; log_x uses a base-10 log scale on the x axis.
std::string render_line_chart_svg(const std::vector<PlotSeries>& series, const std::string& title,
                                  const std::string& x_label, const std::string& y_label, bool log_x = false);

// Reads a CSV with a header row and plots the chosen y columns against the
// x column, writing the SVG to out_path.
void plot_csv(const std::string& csv_path, const std::string& x_column, const std::vector<std::string>& y_columns,
              const std::string& title, const std::string& out_path, bool log_x = false);

}  // namespace cirkit
