#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condatlas/grid.hpp"

namespace condatlas {

// FNV-1a, 64-bit. Stable across platforms; used for dataset checksums.
uint64_t fnv1a64(const void *data, size_t n);
uint64_t fnv1a64_file(const std::string &path); // throws on open failure
std::string hex64(uint64_t v);

void write_text_file(const std::string &path, const std::string &content);
std::string read_text_file(const std::string &path); // throws on open failure

std::string csv_row(const std::vector<std::string> &cells);
std::vector<std::string> split_csv_row(const std::string &line);

std::string format_double(double v); // shortest round-trip decimal

struct ChartSeries {
  std::string name;
  std::vector<double> x, y;
};

// Self-contained SVG line chart with axes, ticks, and a legend.
void write_svg_chart(const std::string &path, const std::string &title, const std::string &x_label,
                     const std::string &y_label, const std::vector<ChartSeries> &series);

// 8-bit PGM of one channel, values min-max normalized. 3D volumes emit the
// central slice along axis 0.
void write_pgm(const std::string &path, const Volume &v, int channel);

// Side-by-side montage of single-channel views (same grid), one PGM.
void write_montage_pgm(const std::string &path, const std::vector<const Volume *> &vols,
                       const std::vector<int> &channels);

} // namespace condatlas
