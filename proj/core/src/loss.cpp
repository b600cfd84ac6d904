#include "focalcomm/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "focalcomm/hungarian.hpp"

namespace focalcomm {

namespace {

constexpr double kProbFloor = 1e-7;

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

// -alpha (1-p)^g log p for positives, -(1-alpha) p^g log(1-p) for negatives,
// with g = 2 realized as squaring.
Tensor focal_terms(const Tensor& p, const Tensor& pos_mask, double alpha) {
    Tensor pc = clamp(p, kProbFloor, 1.0 - kProbFloor);
    Tensor one_minus = add_scalar(scale(pc, -1.0), 1.0);
    Tensor pos_term = scale(mul(mul(one_minus, one_minus), log(pc)), -alpha);
    Tensor neg_term = scale(mul(mul(pc, pc), log(one_minus)), -(1.0 - alpha));
    Tensor neg_mask = add_scalar(scale(pos_mask, -1.0), 1.0);
    return add(mul(pos_mask, pos_term), mul(neg_mask, neg_term));
}

}  // namespace

void LossConfig::validate() const {
    if (lambda_cls < 0.0 || lambda_bbox < 0.0 || lambda_hm < 0.0 || lambda_him < 0.0) {
        throw std::invalid_argument("LossConfig: negative loss weight");
    }
    if (focal_alpha <= 0.0 || focal_alpha >= 1.0) {
        throw std::invalid_argument("LossConfig: focal_alpha must be in (0,1)");
    }
    if (gaussian_min_overlap <= 0.0 || gaussian_min_overlap >= 1.0) {
        throw std::invalid_argument("LossConfig: gaussian_min_overlap must be in (0,1)");
    }
}

Tensor focal_loss(const Tensor& p, int target, double alpha, double gamma_f) {
    if (p.size() != 1) {
        throw std::invalid_argument("focal_loss: probability must be scalar");
    }
    if (target != 0 && target != 1) {
        throw std::invalid_argument("focal_loss: target must be 0 or 1");
    }
    if (gamma_f != 2.0) {
        // the squared form is hard-wired; other exponents are out of scope
        throw std::invalid_argument("focal_loss: only gamma_f = 2 is supported");
    }
    Tensor pos_mask({1}, {target == 1 ? 1.0 : 0.0});
    return focal_terms(p, pos_mask, alpha);
}

Tensor gaussian_focal_loss(const Tensor& pred_sigma, const Tensor& target) {
    if (!pred_sigma.same_shape(target)) {
        throw std::invalid_argument("gaussian_focal_loss: shape mismatch " + pred_sigma.shape_str() + " vs " +
                                    target.shape_str());
    }
    Tensor p = clamp(pred_sigma, kProbFloor, 1.0 - kProbFloor);
    Tensor one_minus = add_scalar(scale(p, -1.0), 1.0);

    // constant masks/weights derived from the target
    Tensor pos_mask(target.shape());
    Tensor neg_weight(target.shape());
    int positives = 0;
    for (std::int64_t i = 0; i < target.size(); ++i) {
        if (target[i] == 1.0) {
            pos_mask[i] = 1.0;
            ++positives;
        } else {
            const double t = 1.0 - target[i];
            neg_weight[i] = t * t * t * t;
        }
    }
    Tensor pos_term = scale(mul(mul(one_minus, one_minus), log(p)), -1.0);
    Tensor neg_term = scale(mul(mul(p, p), log(one_minus)), -1.0);
    Tensor combined = add(mul(pos_mask, pos_term), mul(neg_weight, neg_term));
    return scale(sum_all(combined), 1.0 / static_cast<double>(std::max(1, positives)));
}

namespace {

// Canonical min-overlap radius: the tightest of the three quadratic bounds.
double gaussian_radius(double h_cells, double w_cells, double min_overlap) {
    const double h = h_cells, w = w_cells, o = min_overlap;
    const double b1 = h + w;
    const double c1 = w * h * (1.0 - o) / (1.0 + o);
    const double r1 = (b1 - std::sqrt(std::max(0.0, b1 * b1 - 4.0 * c1))) / 2.0;

    const double a2 = 4.0;
    const double b2 = 2.0 * (h + w);
    const double c2 = (1.0 - o) * w * h;
    const double r2 = (b2 - std::sqrt(std::max(0.0, b2 * b2 - 4.0 * a2 * c2))) / (2.0 * a2);

    const double a3 = 4.0 * o;
    const double b3 = -2.0 * o * (h + w);
    const double c3 = (o - 1.0) * w * h;
    const double r3 = (-b3 + std::sqrt(std::max(0.0, b3 * b3 - 4.0 * a3 * c3))) / (2.0 * a3);
    return std::min({r1, r2, r3});
}

}  // namespace

Tensor gaussian_heatmap_target(const std::vector<GroundTruthBox>& boxes, const BevGrid& grid, int num_classes,
                               double min_overlap) {
    Tensor target({num_classes, grid.height, grid.width});
    const std::int64_t plane = static_cast<std::int64_t>(grid.height) * grid.width;
    for (const GroundTruthBox& box : boxes) {
        if (box.class_id < 0 || box.class_id >= num_classes) {
            throw std::invalid_argument("gaussian_heatmap_target: class id out of range");
        }
        const int cx = grid.cell_x(box.cx);
        const int cy = grid.cell_y(box.cy);
        if (!grid.contains(cy, cx)) continue;
        const double radius =
            std::max(1.0, gaussian_radius(box.length / grid.cell_size, box.width / grid.cell_size, min_overlap));
        const int ri = static_cast<int>(radius);
        const double sigma = (2.0 * radius + 1.0) / 6.0;
        const double denom = 2.0 * sigma * sigma;
        for (int dy = -ri; dy <= ri; ++dy) {
            const int y = cy + dy;
            if (y < 0 || y >= grid.height) continue;
            for (int dx = -ri; dx <= ri; ++dx) {
                const int x = cx + dx;
                if (x < 0 || x >= grid.width) continue;
                const double value = std::exp(-(dx * dx + dy * dy) / denom);
                double& cell = target[static_cast<std::int64_t>(box.class_id) * plane + grid.flat(y, x)];
                cell = std::max(cell, value);
            }
        }
    }
    return target;
}

QueryAssignment assign_queries(const HeadOutput& head_out, const std::vector<GroundTruthBox>& gt,
                               const BevGrid& grid, int num_classes) {
    const int m = static_cast<int>(head_out.cells.size());
    QueryAssignment assignment;
    assignment.matched_gt.assign(static_cast<std::size_t>(m), -1);
    if (m == 0 || gt.empty()) return assignment;

    // decoded query class, score, and center (value-level)
    std::vector<int> query_class(static_cast<std::size_t>(m));
    std::vector<double> query_score(static_cast<std::size_t>(m));
    std::vector<std::array<double, 2>> query_center(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        int best = 0;
        double best_logit = head_out.class_logits.at({i, 0});
        for (int k = 1; k < num_classes; ++k) {
            if (head_out.class_logits.at({i, k}) > best_logit) {
                best_logit = head_out.class_logits.at({i, k});
                best = k;
            }
        }
        query_class[static_cast<std::size_t>(i)] = best;
        query_score[static_cast<std::size_t>(i)] = stable_sigmoid(best_logit);
        const int cell = head_out.cells[static_cast<std::size_t>(i)];
        query_center[static_cast<std::size_t>(i)] = {
            grid.cell_center_x(cell % grid.width) + head_out.box_params.at({i, 0}) * grid.cell_size,
            grid.cell_center_y(cell / grid.width) + head_out.box_params.at({i, 1}) * grid.cell_size};
    }

    for (int cls = 0; cls < num_classes; ++cls) {
        std::vector<int> q_idx;
        std::vector<int> g_idx;
        for (int i = 0; i < m; ++i) {
            if (query_class[static_cast<std::size_t>(i)] == cls) q_idx.push_back(i);
        }
        for (std::size_t j = 0; j < gt.size(); ++j) {
            if (gt[j].class_id == cls) g_idx.push_back(static_cast<int>(j));
        }
        if (q_idx.empty() || g_idx.empty()) continue;
        std::vector<std::vector<double>> cost(q_idx.size(), std::vector<double>(g_idx.size()));
        for (std::size_t i = 0; i < q_idx.size(); ++i) {
            for (std::size_t j = 0; j < g_idx.size(); ++j) {
                const auto& c = query_center[static_cast<std::size_t>(q_idx[i])];
                const GroundTruthBox& g = gt[static_cast<std::size_t>(g_idx[j])];
                cost[i][j] = (1.0 - query_score[static_cast<std::size_t>(q_idx[i])]) +
                             0.25 * (std::abs(c[0] - g.cx) + std::abs(c[1] - g.cy));
            }
        }
        const std::vector<int> assign = hungarian_assign(cost);
        for (std::size_t i = 0; i < q_idx.size(); ++i) {
            if (assign[i] >= 0) {
                assignment.matched_gt[static_cast<std::size_t>(q_idx[i])] =
                    g_idx[static_cast<std::size_t>(assign[i])];
                ++assignment.matched_count;
            }
        }
    }
    return assignment;
}

Tensor l1_box_loss(const HeadOutput& head_out, const QueryAssignment& assignment,
                   const std::vector<GroundTruthBox>& gt, const BevGrid& grid) {
    const int m = head_out.box_params.extent(0);
    if (static_cast<int>(assignment.matched_gt.size()) != m) {
        throw std::invalid_argument("l1_box_loss: assignment size mismatch");
    }
    if (assignment.matched_count == 0) {
        return Tensor::scalar(0.0);
    }
    Tensor targets(head_out.box_params.shape());
    Tensor row_mask({m, 1});
    for (int i = 0; i < m; ++i) {
        const int j = assignment.matched_gt[static_cast<std::size_t>(i)];
        if (j < 0) continue;
        row_mask.at({i, 0}) = 1.0;
        const auto t = DetectionHead::regression_targets(gt[static_cast<std::size_t>(j)],
                                                         head_out.cells[static_cast<std::size_t>(i)], grid);
        for (int d = 0; d < 8; ++d) targets.at({i, d}) = t[static_cast<std::size_t>(d)];
    }
    Tensor residual = mul(sub(head_out.box_params, targets), row_mask);
    Tensor abs_residual = add(relu(residual), relu(scale(residual, -1.0)));
    return scale(sum_all(abs_residual), 1.0 / (8.0 * static_cast<double>(assignment.matched_count)));
}

Tensor classification_loss(const Tensor& class_logits, const QueryAssignment& assignment,
                           const std::vector<GroundTruthBox>& gt, const LossConfig& cfg) {
    const int m = class_logits.extent(0);
    const int k = class_logits.extent(1);
    if (static_cast<int>(assignment.matched_gt.size()) != m) {
        throw std::invalid_argument("classification_loss: assignment size mismatch");
    }
    Tensor pos_mask({m, k});
    for (int i = 0; i < m; ++i) {
        const int j = assignment.matched_gt[static_cast<std::size_t>(i)];
        if (j < 0) continue;
        pos_mask.at({i, gt[static_cast<std::size_t>(j)].class_id}) = 1.0;
    }
    Tensor p = sigmoid(class_logits);
    Tensor terms = focal_terms(p, pos_mask, cfg.focal_alpha);
    return scale(sum_all(terms), 1.0 / static_cast<double>(std::max(1, assignment.matched_count)));
}

Tensor him_stage_loss(const Tensor& stage_logits, const Tensor& incoming_mask, const Tensor& full_target) {
    if (!stage_logits.same_shape(full_target) || !stage_logits.same_shape(incoming_mask)) {
        throw std::invalid_argument("him_stage_loss: shape mismatch");
    }
    Tensor stage_target(full_target.shape());
    for (std::int64_t i = 0; i < full_target.size(); ++i) {
        stage_target[i] = incoming_mask[i] == 0.0 ? full_target[i] : 0.0;
    }
    return gaussian_focal_loss(sigmoid(stage_logits), stage_target);
}

SceneLoss total_loss(const HeadOutput& head_out, const std::vector<const HimResult*>& him_results,
                     const std::vector<GroundTruthBox>& gt, const BevGrid& grid, const LossConfig& cfg) {
    cfg.validate();
    const int num_classes = head_out.heatmap_logits.extent(0);
    const QueryAssignment assignment = assign_queries(head_out, gt, grid, num_classes);

    Tensor cls = classification_loss(head_out.class_logits, assignment, gt, cfg);
    Tensor bbox = l1_box_loss(head_out, assignment, gt, grid);

    const Tensor full_target = gaussian_heatmap_target(gt, grid, num_classes, cfg.gaussian_min_overlap);
    Tensor hm = gaussian_focal_loss(sigmoid(head_out.heatmap_logits), full_target);

    // mining supervision: per stage, mean over agents
    int n_stages = 0;
    for (const HimResult* him : him_results) {
        n_stages = std::max(n_stages, static_cast<int>(him->stages.size()));
    }
    std::vector<Tensor> him_losses;
    for (int s = 0; s < n_stages; ++s) {
        Tensor acc;
        int count = 0;
        for (const HimResult* him : him_results) {
            if (s >= static_cast<int>(him->stages.size())) continue;
            Tensor stage = him_stage_loss(him->stages[static_cast<std::size_t>(s)].heatmap_logits,
                                          him->incoming_masks[static_cast<std::size_t>(s)], full_target);
            acc = count == 0 ? stage : add(acc, stage);
            ++count;
        }
        him_losses.push_back(scale(acc, 1.0 / static_cast<double>(count)));
    }

    Tensor total = add(scale(cls, cfg.lambda_cls), add(scale(bbox, cfg.lambda_bbox), scale(hm, cfg.lambda_hm)));
    for (const Tensor& stage : him_losses) {
        total = add(total, scale(stage, cfg.lambda_him));
    }

    SceneLoss out;
    out.total = total;
    out.breakdown.cls = cls.item();
    out.breakdown.bbox = bbox.item();
    out.breakdown.hm = hm.item();
    for (const Tensor& stage : him_losses) out.breakdown.him_per_stage.push_back(stage.item());
    out.breakdown.total = total.item();
    return out;
}

}  // namespace focalcomm
