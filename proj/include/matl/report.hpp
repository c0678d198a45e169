#pragma once

#include "matl/transfer.hpp"

#include <string>

namespace matl {

// Parses matrix_long.csv text back into a matrix. Counts keep their order
// of first appearance.
EvalMatrix parse_matrix_long(const std::string& csv);

// Mean cell value against train count at one eval count, with +-std error
// bars. 800x600. Throws UsageError listing the available eval counts.
std::string line_plot_svg(const EvalMatrix& matrix, int eval_count, const std::string& value_label);

// Whole matrix as a colored grid, rows = train count.
std::string heatmap_svg(const EvalMatrix& matrix, const std::string& value_label);

}  // namespace matl
