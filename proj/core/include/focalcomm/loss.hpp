#pragma once

#include <array>
#include <vector>

#include "focalcomm/head.hpp"
#include "focalcomm/him.hpp"
#include "focalcomm/ops.hpp"

namespace focalcomm {

struct LossConfig {
    double lambda_cls = 1.0;
    double lambda_bbox = 2.0;
    double lambda_hm = 1.0;
    double lambda_him = 0.5;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double gaussian_min_overlap = 0.1;

    void validate() const;
};

struct LossBreakdown {
    double cls = 0.0;
    double bbox = 0.0;
    double hm = 0.0;
    std::vector<double> him_per_stage;
    double total = 0.0;
};

/// Tracked total plus its numeric breakdown (unweighted components).
struct SceneLoss {
    Tensor total;  // [1]
    LossBreakdown breakdown;
};

/// Binary focal term for a single probability; p is clamped to
/// [1e-7, 1 - 1e-7] first.
Tensor focal_loss(const Tensor& p, int target, double alpha = 0.25, double gamma_f = 2.0);

/// Penalty-reduced focal loss between a sigmoid map and a Gaussian target,
/// normalized by the number of target==1 cells (at least 1).
Tensor gaussian_focal_loss(const Tensor& pred_sigma, const Tensor& target);

/// CenterNet-style Gaussian center splats, one plane per class; radius from
/// the min-overlap formula on the box footprint in cells, floored at 1 cell;
/// overlaps combine by max. Boxes whose center cell is outside the grid are
/// skipped.
Tensor gaussian_heatmap_target(const std::vector<GroundTruthBox>& boxes, const BevGrid& grid, int num_classes,
                               double min_overlap = 0.1);

/// Per-query assignment of head predictions to ground truth (per class,
/// Hungarian, cost = (1 - score) + 0.25 * L1 center distance in meters).
struct QueryAssignment {
    std::vector<int> matched_gt;  // per query: gt index or -1
    int matched_count = 0;
};
QueryAssignment assign_queries(const HeadOutput& head_out, const std::vector<GroundTruthBox>& gt,
                               const BevGrid& grid, int num_classes);

/// Mean absolute difference over the 8 regression targets of matched pairs;
/// exactly 0 when nothing matches.
Tensor l1_box_loss(const HeadOutput& head_out, const QueryAssignment& assignment,
                   const std::vector<GroundTruthBox>& gt, const BevGrid& grid);

/// Sigmoid focal classification over matched/background query-class pairs,
/// normalized by the number of matches (at least 1).
Tensor classification_loss(const Tensor& class_logits, const QueryAssignment& assignment,
                           const std::vector<GroundTruthBox>& gt, const LossConfig& cfg);

/// Stage supervision: the full Gaussian target with cells already claimed by
/// the incoming accumulated mask zeroed out.
Tensor him_stage_loss(const Tensor& stage_logits, const Tensor& incoming_mask, const Tensor& full_target);

/// Joint objective over one scene. him_results may be empty (mining ablated).
SceneLoss total_loss(const HeadOutput& head_out, const std::vector<const HimResult*>& him_results,
                     const std::vector<GroundTruthBox>& gt, const BevGrid& grid, const LossConfig& cfg);

}  // namespace focalcomm
