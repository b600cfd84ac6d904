#include "focalcomm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace focalcomm {

double wrap_angle(double yaw) {
    constexpr double two_pi = 2.0 * M_PI;
    yaw = std::fmod(yaw, two_pi);
    if (yaw <= -M_PI) yaw += two_pi;
    if (yaw > M_PI) yaw -= two_pi;
    return yaw;
}

std::array<std::array<double, 2>, 4> box_corners(const OrientedBox& box) {
    const double c = std::cos(box.yaw);
    const double s = std::sin(box.yaw);
    const double hl = 0.5 * box.length;
    const double hw = 0.5 * box.width;
    // local corners in counter-clockwise order
    const std::array<std::array<double, 2>, 4> local = {{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
    std::array<std::array<double, 2>, 4> out;
    for (std::size_t i = 0; i < 4; ++i) {
        out[i][0] = box.cx + c * local[i][0] - s * local[i][1];
        out[i][1] = box.cy + s * local[i][0] + c * local[i][1];
    }
    return out;
}

namespace {

double polygon_area(const std::vector<std::array<double, 2>>& poly) {
    const std::size_t n = poly.size();
    if (n < 3) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = poly[i];
        const auto& q = poly[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    return 0.5 * std::abs(acc);
}

}  // namespace

double convex_intersection_area(const std::vector<std::array<double, 2>>& subject,
                                const std::vector<std::array<double, 2>>& clip) {
    std::vector<std::array<double, 2>> poly = subject;
    const std::size_t n = clip.size();
    for (std::size_t i = 0; i < n && !poly.empty(); ++i) {
        const auto& a = clip[i];
        const auto& b = clip[(i + 1) % n];
        // keep points on the left of edge a->b (counter-clockwise clip polygon)
        std::vector<std::array<double, 2>> next;
        next.reserve(poly.size() + 2);
        const auto side = [&](const std::array<double, 2>& p) {
            return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        };
        const std::size_t m = poly.size();
        for (std::size_t j = 0; j < m; ++j) {
            const auto& p = poly[j];
            const auto& q = poly[(j + 1) % m];
            const double sp = side(p);
            const double sq = side(q);
            if (sp >= 0.0) next.push_back(p);
            if ((sp > 0.0 && sq < 0.0) || (sp < 0.0 && sq > 0.0)) {
                const double t = sp / (sp - sq);
                next.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
            }
        }
        poly = std::move(next);
    }
    return polygon_area(poly);
}

double rotated_bev_iou(const OrientedBox& a, const OrientedBox& b) {
    if (a.length <= 0.0 || a.width <= 0.0 || b.length <= 0.0 || b.width <= 0.0) {
        throw std::invalid_argument("rotated_bev_iou: degenerate box");
    }
    const auto ca = box_corners(a);
    const auto cb = box_corners(b);
    const std::vector<std::array<double, 2>> pa(ca.begin(), ca.end());
    const std::vector<std::array<double, 2>> pb(cb.begin(), cb.end());
    const double inter = convex_intersection_area(pa, pb);
    const double area_a = a.length * a.width;
    const double area_b = b.length * b.width;
    const double uni = area_a + area_b - inter;
    if (uni <= 0.0) return 0.0;
    return std::min(1.0, std::max(0.0, inter / uni));
}

std::vector<int> greedy_nms(const std::vector<OrientedBox>& boxes, const std::vector<double>& scores,
                            double iou_threshold) {
    if (boxes.size() != scores.size()) {
        throw std::invalid_argument("greedy_nms: box/score count mismatch");
    }
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
        if (scores[static_cast<std::size_t>(i)] != scores[static_cast<std::size_t>(j)]) {
            return scores[static_cast<std::size_t>(i)] > scores[static_cast<std::size_t>(j)];
        }
        return i < j;
    });
    std::vector<int> kept;
    std::vector<bool> suppressed(boxes.size(), false);
    for (int idx : order) {
        if (suppressed[static_cast<std::size_t>(idx)]) continue;
        kept.push_back(idx);
        for (int other : order) {
            if (other == idx || suppressed[static_cast<std::size_t>(other)]) continue;
            if (rotated_bev_iou(boxes[static_cast<std::size_t>(idx)], boxes[static_cast<std::size_t>(other)]) >
                iou_threshold) {
                suppressed[static_cast<std::size_t>(other)] = true;
            }
        }
    }
    return kept;
}

}  // namespace focalcomm
