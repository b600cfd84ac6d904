#include "focalcomm/hungarian.hpp"

#include <limits>
#include <stdexcept>

namespace focalcomm {

namespace {

// Potentials-based assignment for an n x m matrix with n <= m (all rows get a
// column). 0-based wrapper around the classic 1-indexed formulation.
std::vector<int> assign_rows_leq_cols(const std::vector<std::vector<double>>& a, int n, int m) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(m) + 1, 0);
    std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
        std::vector<bool> used(static_cast<std::size_t>(m) + 1, false);
        do {
            used[static_cast<std::size_t>(j0)] = true;
            const int i0 = p[static_cast<std::size_t>(j0)];
            int j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = a[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                                   u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j) {
        if (p[static_cast<std::size_t>(j)] > 0) {
            row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
        }
    }
    return row_to_col;
}

}  // namespace

std::vector<int> hungarian_assign(const std::vector<std::vector<double>>& cost) {
    const int rows = static_cast<int>(cost.size());
    if (rows == 0) return {};
    const int cols = static_cast<int>(cost[0].size());
    if (cols == 0) return std::vector<int>(static_cast<std::size_t>(rows), -1);
    for (const auto& row : cost) {
        if (static_cast<int>(row.size()) != cols) {
            throw std::invalid_argument("hungarian_assign: ragged cost matrix");
        }
    }
    if (rows <= cols) {
        return assign_rows_leq_cols(cost, rows, cols);
    }
    // more rows than columns: solve the transpose and invert the mapping
    std::vector<std::vector<double>> tr(static_cast<std::size_t>(cols),
                                        std::vector<double>(static_cast<std::size_t>(rows)));
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            tr[static_cast<std::size_t>(c)][static_cast<std::size_t>(r)] =
                cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        }
    }
    const std::vector<int> col_to_row = assign_rows_leq_cols(tr, cols, rows);
    std::vector<int> row_to_col(static_cast<std::size_t>(rows), -1);
    for (int c = 0; c < cols; ++c) {
        const int r = col_to_row[static_cast<std::size_t>(c)];
        if (r >= 0) row_to_col[static_cast<std::size_t>(r)] = c;
    }
    return row_to_col;
}

}  // namespace focalcomm
