#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "focalcomm/head.hpp"
#include "focalcomm/scene.hpp"

namespace focalcomm {

struct EvalConfig {
    std::vector<double> iou_thresholds = {0.3, 0.5};
    double range_xy = 100.0;  // ego-centric |x|,|y| cut for boxes and detections
    // PR integration scheme; only all-point (precision envelope) is implemented
    std::string interpolation = "all_points";
    int num_classes = kNumClasses;

    void validate() const;
};

/// AP for one class at one IoU threshold over a set of scenes. Detections are
/// ranked by descending score (ties by scene then input order) and greedily
/// matched to the highest-IoU unclaimed same-class ground truth of their own
/// scene; the PR curve is integrated with the all-point precision envelope.
/// Out-of-range boxes are dropped first. Returns nullopt when the class has
/// no in-range ground truth.
std::optional<double> average_precision(const std::vector<std::vector<Detection>>& detections_per_scene,
                                        const std::vector<std::vector<GroundTruthBox>>& gt_per_scene,
                                        double iou_threshold, int class_id, double range_xy);

/// Single-scene convenience overload.
std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<GroundTruthBox>& gt, double iou_threshold,
                                        int class_id, double range_xy = 100.0);

struct SceneTrace {
    std::string scene;
    std::vector<double> stage_weights;
    std::vector<double> agent_weights;
    std::vector<Detection> detections;
};

struct MetricsReport {
    std::vector<double> thresholds;
    // class id -> AP per threshold (only classes with ground truth appear)
    std::map<int, std::vector<double>> per_class_ap;
    std::vector<double> map_per_threshold;  // mean over present classes
    std::vector<SceneTrace> per_scene;
};

MetricsReport evaluate_scenes(const std::vector<std::vector<Detection>>& detections_per_scene,
                              const std::vector<std::vector<GroundTruthBox>>& gt_per_scene,
                              const EvalConfig& cfg);

/// Report JSON: {config, per_class: {car: {ap03, ap05}}, map03, map05,
/// per_scene: [...]}. `config_json_text` is embedded under "config".
std::string metrics_report_to_json(const MetricsReport& report, const std::string& config_json_text);

/// Learned channel bottleneck on exchanged features: biasless 1x1
/// down-projection to C/ratio followed by up-projection back to C. Ratio 1 is
/// the identity map with no parameters.
class CompressionAdapter {
public:
    CompressionAdapter(int channels, int ratio);

    Tensor apply(const Tensor& features) const;  // [C,H,W] -> [C,H,W]
    std::vector<Parameter*> parameters();
    void init(std::mt19937_64& rng);
    int ratio() const { return ratio_; }
    int channels() const { return channels_; }

    Parameter down;  // [C/r, C, 1, 1]
    Parameter up;    // [C, C/r, 1, 1]

private:
    int channels_;
    int ratio_;
};

struct SweepRow {
    int ratio = 1;
    std::vector<double> map_per_threshold;
};

/// CSV with header "ratio,map03,map05" (column names follow the thresholds).
std::string sweep_table_to_csv(const std::vector<SweepRow>& rows, const std::vector<double>& thresholds);

}  // namespace focalcomm
