#pragma once

#include <vector>

namespace focalcomm {

/// Minimum-cost assignment between rows and columns of a (possibly
/// rectangular) cost matrix, cost[r][c]. Returns, per row, the assigned
/// column or -1 when the row stays unassigned (only possible when rows >
/// cols). The number of assigned pairs is min(rows, cols).
std::vector<int> hungarian_assign(const std::vector<std::vector<double>>& cost);

}  // namespace focalcomm
