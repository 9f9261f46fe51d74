#include "cirkit/plot.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cirkit/util.h"

namespace cirkit {

namespace {

const char* kSeriesColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

std::string render_line_chart_svg(const std::vector<PlotSeries>& series, const std::string& title,
                                  const std::string& x_label, const std::string& y_label, bool log_x) {
    const double width = 640, height = 440;
    const double left = 70, right = 30, top = 50, bottom = 60;
    const double plot_w = width - left - right;
    const double plot_h = height - top - bottom;

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const PlotSeries& s : series) {
        if (s.x.size() != s.y.size()) throw std::runtime_error("series x/y length mismatch");
        for (size_t i = 0; i < s.x.size(); ++i) {
            double xv = log_x ? std::log10(std::max(s.x[i], 1e-12)) : s.x[i];
            xmin = std::min(xmin, xv);
            xmax = std::max(xmax, xv);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
    }
    if (ymin > ymax) {
        ymin = 0;
        ymax = 1;
    }
    if (xmax - xmin < 1e-12) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    double ypad = (ymax - ymin < 1e-12) ? std::max(0.05, std::abs(ymax) * 0.1) : (ymax - ymin) * 0.08;
    ymin -= ypad;
    ymax += ypad;

    auto sx = [&](double x) {
        double v = log_x ? std::log10(std::max(x, 1e-12)) : x;
        return left + (v - xmin) / (xmax - xmin) * plot_w;
    };
    auto sy = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * plot_h; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" font-family=\"sans-serif\">"
        << title << "</text>\n";

    // axes and grid
    svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\"" << plot_h
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
        double fy = ymin + (ymax - ymin) * i / ticks;
        double py = sy(fy);
        svg << "<line x1=\"" << left << "\" y1=\"" << py << "\" x2=\"" << left + plot_w << "\" y2=\"" << py
            << "\" stroke=\"#ddd\"/>\n";
        svg << "<text x=\"" << left - 8 << "\" y=\"" << py + 4
            << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(fy) << "</text>\n";

        double fxv = xmin + (xmax - xmin) * i / ticks;
        double fx = log_x ? std::pow(10.0, fxv) : fxv;
        double px = left + (fxv - xmin) / (xmax - xmin) * plot_w;
        svg << "<text x=\"" << px << "\" y=\"" << top + plot_h + 18
            << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(fx) << "</text>\n";
    }
    svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 14
        << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">" << x_label << "</text>\n";
    svg << "<text x=\"18\" y=\"" << top + plot_h / 2
        << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" transform=\"rotate(-90 18 "
        << top + plot_h / 2 << ")\">" << y_label << "</text>\n";

    for (size_t s = 0; s < series.size(); ++s) {
        const char* color = kSeriesColors[s % 6];
        std::ostringstream pts;
        for (size_t i = 0; i < series[s].x.size(); ++i) {
            if (i) pts << ' ';
            pts << sx(series[s].x[i]) << ',' << sy(series[s].y[i]);
        }
        svg << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"2\"/>\n";
        for (size_t i = 0; i < series[s].x.size(); ++i) {
            svg << "<circle cx=\"" << sx(series[s].x[i]) << "\" cy=\"" << sy(series[s].y[i]) << "\" r=\"3\" fill=\""
                << color << "\"/>\n";
        }
        svg << "<text x=\"" << left + plot_w - 8 << "\" y=\"" << top + 16 + 16 * s
            << "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\" fill=\"" << color << "\">"
            << series[s].label << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

void plot_csv(const std::string& csv_path, const std::string& x_column, const std::vector<std::string>& y_columns,
              const std::string& title, const std::string& out_path, bool log_x) {
    std::vector<std::vector<std::string>> rows;
    for_each_line(csv_path, [&](size_t, const std::string& line) {
        if (line.empty()) return;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream is(line);
        while (std::getline(is, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    });
    if (rows.size() < 2) throw std::runtime_error("csv has no data rows: " + csv_path);

    const std::vector<std::string>& header = rows.front();
    auto column_of = [&](const std::string& name) {
        for (size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return i;
        }
        throw std::runtime_error("csv lacks column " + name);
    };

    size_t xc = column_of(x_column);
    std::vector<PlotSeries> series;
    for (const std::string& yname : y_columns) {
        size_t yc = column_of(yname);
        PlotSeries s;
        s.label = yname;
        for (size_t r = 1; r < rows.size(); ++r) {
            if (xc >= rows[r].size() || yc >= rows[r].size()) continue;
            if (rows[r][xc].empty() || rows[r][yc].empty()) continue;
            s.x.push_back(std::stod(rows[r][xc]));
            s.y.push_back(std::stod(rows[r][yc]));
        }
        series.push_back(std::move(s));
    }
    atomic_write_file(out_path, render_line_chart_svg(series, title, x_column, "value", log_x));
}

}  // namespace cirkit
