#pragma once

// Minimal SVG output for the analysis exports. CSV stays the canonical data.

#include <filesystem>
#include <string>
#include <vector>

namespace sedlab::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

void line_chart(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series,
                const std::string& x_label, const std::string& y_label);

/// One row of cells per entry; values in [0, 1] map to a white-to-blue ramp.
/// Rows may have different lengths.
void heatmap(const std::filesystem::path& path, const std::string& title, const std::vector<std::vector<double>>& rows,
             const std::vector<std::vector<std::string>>& cell_labels = {});

}  // namespace sedlab::svg
