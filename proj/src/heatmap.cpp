#include "headlens/heatmap.hpp"

#include <algorithm>
#include <cstdio>

#include "headlens/common.hpp"
#include "headlens/io.hpp"

namespace headlens::heatmap {

double gray_percent(double v, double lo, double hi) {
    double t = 0.0;
    if (hi > lo) t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    // lightest 94%, darkest 8%
    return 94.0 - 86.0 * t;
}

void export_svg_heatmap(const std::vector<std::vector<double>> &rows, const std::string &out_path,
                        const std::string &title, double lo, double hi) {
    check_contract(!rows.empty() && !rows[0].empty(), "export_svg_heatmap: empty matrix");
    const int n_rows = static_cast<int>(rows.size());
    const int n_cols = static_cast<int>(rows[0].size());
    for (const auto &r : rows) {
        check_contract(static_cast<int>(r.size()) == n_cols, "export_svg_heatmap: ragged matrix");
    }
    if (!(hi > lo)) {
        lo = rows[0][0];
        hi = rows[0][0];
        for (const auto &r : rows) {
            for (double v : r) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
    }

    const double cell = 26.0;
    const double margin = 46.0;
    const double legend_h = 44.0;
    const double width = margin * 2 + cell * n_cols;
    const double height = margin * 2 + cell * n_rows + legend_h;

    std::string svg;
    char buf[256];
    auto emit = [&](const char *fmt, auto... args) {
        std::snprintf(buf, sizeof(buf), fmt, args...);
        svg += buf;
    };
    emit("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n",
         width, height, width, height);
    emit("<title>%s</title>\n", title.c_str());
    emit("<rect width=\"%g\" height=\"%g\" fill=\"white\"/>\n", width, height);
    emit("<text x=\"%g\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">%s</text>\n", margin,
         title.c_str());

    for (int r = 0; r < n_rows; ++r) {
        for (int c = 0; c < n_cols; ++c) {
            const double pct = gray_percent(rows[static_cast<size_t>(r)][static_cast<size_t>(c)], lo, hi);
            const std::string p = io::format_double(pct);
            emit("<rect class=\"cell\" data-row=\"%d\" data-col=\"%d\" x=\"%g\" y=\"%g\" width=\"%g\" "
                 "height=\"%g\" fill=\"rgb(%s%%,%s%%,%s%%)\" stroke=\"#777\" stroke-width=\"0.5\"/>\n",
                 r, c, margin + c * cell, margin + r * cell, cell, cell, p.c_str(), p.c_str(), p.c_str());
        }
    }
    // axis ticks
    for (int c = 0; c < n_cols; ++c) {
        emit("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">%d</text>\n",
             margin + (c + 0.5) * cell, margin - 6.0, c);
    }
    for (int r = 0; r < n_rows; ++r) {
        emit("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\">%d</text>\n",
             margin - 6.0, margin + (r + 0.6) * cell, r);
    }
    // legend: gradient strip with numeric range
    const double ly = margin + n_rows * cell + 18.0;
    const int swatches = 64;
    const double lw = cell * n_cols / swatches;
    for (int i = 0; i < swatches; ++i) {
        const double v = lo + (hi - lo) * (swatches <= 1 ? 0.0 : static_cast<double>(i) / (swatches - 1));
        const std::string p = io::format_double(gray_percent(v, lo, hi));
        emit("<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"10\" fill=\"rgb(%s%%,%s%%,%s%%)\"/>\n",
             margin + i * lw, ly, lw + 0.5, p.c_str(), p.c_str(), p.c_str());
    }
    emit("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"10\">%s</text>\n", margin, ly + 24.0,
         io::format_double(lo).c_str());
    emit("<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">%s</text>\n",
         margin + n_cols * cell, ly + 24.0, io::format_double(hi).c_str());
    svg += "</svg>\n";

    io::write_file(out_path, svg);
}

}  // namespace headlens::heatmap
