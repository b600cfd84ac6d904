#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "focalcomm/ops.hpp"
#include "focalcomm/scene.hpp"
#include "focalcomm/tape.hpp"

namespace focalcomm {

/// Metric placement of a BEV grid: maps cells to meters.
struct BevGrid {
    double x_min = 0.0;
    double y_min = 0.0;
    double cell_size = 0.0;
    int height = 0;
    int width = 0;

    double cell_center_x(int x) const { return x_min + (x + 0.5) * cell_size; }
    double cell_center_y(int y) const { return y_min + (y + 0.5) * cell_size; }
    int flat(int y, int x) const { return y * width + x; }
    int cell_x(double x) const { return static_cast<int>(std::floor((x - x_min) / cell_size)); }
    int cell_y(double y) const { return static_cast<int>(std::floor((y - y_min) / cell_size)); }
    bool contains(int y, int x) const { return y >= 0 && y < height && x >= 0 && x < width; }
};

struct HimConfig {
    int n_stages = 3;
    double tau = 0.4;    // base confidence threshold
    double gamma = 2.0;  // stage threshold decay factor
    // The stage progression is tau * gamma^{-s} so later stages accept
    // lower-confidence instances; set false for tau * gamma^{+s}.
    bool threshold_decay = true;
    double tau_iou = 0.5;  // BEV IoU gate for training Match
    int peak_kernel = 3;

    void validate() const;
    double stage_threshold(int stage) const;
};

enum class HimMode { Train, Infer };

struct StagePrediction {
    int cell = 0;  // flat row-major index into H x W
    int class_id = 0;
    double score = 0.0;   // sigmoid of the class logit at the cell
    GroundTruthBox box;   // class-prior box at the cell center
};

struct StageOutput {
    Tensor features;        // [C, H, W]
    Tensor heatmap_logits;  // [K, H, W]
    std::vector<StagePrediction> predictions;
    Tensor stage_mask;  // [K, H, W] binary
};

struct HimResult {
    std::vector<StageOutput> stages;
    Tensor combined_query;   // [n_stages * C, H, W]
    Tensor accumulated_mask; // final class-aware mask [K, H, W]
    /// Accumulated mask state *before* each stage ran (stage loss targets
    /// mask out instances already claimed by earlier stages).
    std::vector<Tensor> incoming_masks;
};

/// Multi-stage hard instance mining: mask-and-re-detect over cached original
/// features. Stage extractors are stage-specific 3x3 convolutions; the
/// detector is a single 1x1 convolution to class logits shared by all stages.
class HimModule {
public:
    HimModule(int channels, int n_stages, int num_classes = kNumClasses);

    HimResult run(const Tensor& features, const std::vector<GroundTruthBox>* gt, const HimConfig& cfg,
                  HimMode mode, const BevGrid& grid) const;

    /// Inference-path stage mask: peak cells with sigmoid(logit) above the
    /// stage threshold, per class plane.
    static Tensor filter(const Tensor& heatmap_logits, int stage, const HimConfig& cfg);

    /// Training-path stage mask: per-class Hungarian assignment between
    /// predictions and ground truth with cost (1 - score) + 0.25 * L1 center
    /// distance in meters; assigned pairs with BEV IoU above tau_iou mark the
    /// prediction's cell in its class plane.
    static Tensor match(const std::vector<StagePrediction>& predictions,
                        const std::vector<GroundTruthBox>& gt, double tau_iou, int num_classes,
                        const BevGrid& grid);

    std::vector<Parameter*> parameters();
    void init(std::mt19937_64& rng);

    int channels() const { return channels_; }
    int n_stages() const { return n_stages_; }
    int num_classes() const { return num_classes_; }

private:
    int channels_;
    int n_stages_;
    int num_classes_;
    struct StageExtractor {
        Parameter weight;  // [C, C, 3, 3]
        Parameter bias;    // [C]
    };
    std::vector<StageExtractor> extractors_;
    Parameter detector_weight_;  // [K, C, 1, 1]
    Parameter detector_bias_;    // [K], initialized to -2.19 (sigmoid ~ 0.1)
};

/// P5 binary PGM with header "P5 <W> <H> 255"; pixel = round(255 * sigmoid(logit)).
std::string heatmap_to_pgm(const Tensor& heatmap_logits, int class_plane);

}  // namespace focalcomm
