#pragma once

#include <random>
#include <vector>

#include "focalcomm/him.hpp"
#include "focalcomm/ops.hpp"
#include "focalcomm/tape.hpp"

namespace focalcomm {

struct HeadConfig {
    int heads = 8;
    int model_dim = 256;
    int top_k = 64;
    double nms_iou = 0.2;

    void validate() const;
};

struct Detection {
    GroundTruthBox box;
    int class_id = 0;
    double score = 0.0;
};

/// Differentiable head outputs for one scene; queries are ordered by
/// descending heatmap score with row-major cell ties.
struct HeadOutput {
    Tensor heatmap_logits;   // [K, H, W]
    std::vector<int> cells;  // flat query cells, size M
    Tensor class_logits;     // [M, K]
    Tensor box_params;       // [M, 8]: offset xy, z, log l/w/h, sin yaw, cos yaw
};

/// Anchor-free decoder: dense heatmap branch over the fused features, query
/// selection from heatmap peaks (optionally concatenated with the mining
/// query vector at the same cell), one decoder layer of self- plus
/// cross-attention, and separate regression branches.
class DetectionHead {
public:
    /// him_query_channels = 0 builds the head without the mining-query input.
    DetectionHead(int fused_channels, int him_query_channels, const HeadConfig& cfg,
                  int num_classes = kNumClasses);

    /// fused: [C,H,W] fusion output; ego: [C,H,W] ego BEV map (channel-
    /// concatenated per the head input combination); him_query: optional
    /// [QC,H,W] combined mining queries.
    HeadOutput forward(const Tensor& fused, const Tensor& ego, const Tensor* him_query, int top_k) const;

    /// Box assembly + per-class greedy NMS on the forward output.
    std::vector<Detection> decode(const HeadOutput& out, const BevGrid& grid, double nms_iou) const;

    /// Regression targets for a ground-truth box observed from a query cell.
    static std::array<double, 8> regression_targets(const GroundTruthBox& gt, int cell, const BevGrid& grid);

    std::vector<Parameter*> parameters();
    void init(std::mt19937_64& rng);

    int num_classes() const { return num_classes_; }

    Parameter input_w, input_b;      // [D, 2C, 1, 1], [D]
    Parameter heatmap_w, heatmap_b;  // [K, D, 1, 1], [K]
    Parameter query_w, query_b;      // [D + QC, D], [D]
    // decoder layer
    Parameter self_q_w, self_q_b, self_k_w, self_k_b, self_v_w, self_v_b, self_o_w, self_o_b;
    Parameter cross_q_w, cross_q_b, cross_k_w, cross_k_b, cross_v_w, cross_v_b, cross_o_w, cross_o_b;
    Parameter ffn1_w, ffn1_b, ffn2_w, ffn2_b;
    // branches
    Parameter offset_w, offset_b;  // [D,2]
    Parameter zed_w, zed_b;        // [D,1]
    Parameter dims_w, dims_b;      // [D,3]
    Parameter rot_w, rot_b;        // [D,2]
    Parameter cls_w, cls_b;        // [D,K]

private:
    Tensor attention(const Tensor& queries, const Tensor& memory, const Parameter& qw, const Parameter& qb,
                     const Parameter& kw, const Parameter& kb, const Parameter& vw, const Parameter& vb,
                     const Parameter& ow, const Parameter& ob) const;

    int fused_channels_;
    int him_query_channels_;
    int num_classes_;
    HeadConfig cfg_;
};

}  // namespace focalcomm
