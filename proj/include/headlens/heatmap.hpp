#pragma once

#include <string>
#include <vector>

namespace headlens::heatmap {

// Gray level (CSS percentage) for a score: lo maps to the lightest cell, hi
// to the darkest; strictly monotone between. Printed at full precision so
// distinct normalized scores get distinct fills.
double gray_percent(double v, double lo, double hi);

// SVG grid with one cell per matrix entry (columns = heads, rows = layers)
// and a numeric legend. With lo >= hi the scale is taken from the data.
void export_svg_heatmap(const std::vector<std::vector<double>> &rows, const std::string &out_path,
                        const std::string &title, double lo = 0.0, double hi = 0.0);

}  // namespace headlens::heatmap
