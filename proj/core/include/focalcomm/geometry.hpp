#pragma once

#include <array>
#include <vector>

namespace focalcomm {

/// Oriented box in the BEV plane: center (meters), full extents, yaw in
/// radians measured counter-clockwise from +x.
struct OrientedBox {
    double cx = 0.0;
    double cy = 0.0;
    double length = 0.0;  // extent along the box's local x axis
    double width = 0.0;   // extent along the box's local y axis
    double yaw = 0.0;
};

/// Wraps an angle to (-pi, pi].
double wrap_angle(double yaw);

/// Corners of the box in counter-clockwise order.
std::array<std::array<double, 2>, 4> box_corners(const OrientedBox& box);

/// Area of intersection of two convex polygons (Sutherland-Hodgman clip).
double convex_intersection_area(const std::vector<std::array<double, 2>>& subject,
                                const std::vector<std::array<double, 2>>& clip);

/// Rotated BEV IoU via convex polygon clipping. Rejects degenerate boxes.
double rotated_bev_iou(const OrientedBox& a, const OrientedBox& b);

/// Greedy rotated-IoU non-maximum suppression. Returns indices of kept boxes
/// in descending-score order; candidates must all belong to one class.
std::vector<int> greedy_nms(const std::vector<OrientedBox>& boxes, const std::vector<double>& scores,
                            double iou_threshold);

}  // namespace focalcomm
