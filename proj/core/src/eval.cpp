#include "focalcomm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "focalcomm/geometry.hpp"
#include "focalcomm/init.hpp"
#include "focalcomm/ops.hpp"

namespace focalcomm {

void EvalConfig::validate() const {
    if (iou_thresholds.empty()) {
        throw std::invalid_argument("EvalConfig: no IoU thresholds");
    }
    for (double t : iou_thresholds) {
        if (t <= 0.0 || t > 1.0) {
            throw std::invalid_argument("EvalConfig: IoU threshold must be in (0, 1]");
        }
    }
    if (range_xy <= 0.0) {
        throw std::invalid_argument("EvalConfig: range must be positive");
    }
    if (interpolation != "all_points") {
        throw std::invalid_argument("EvalConfig: unsupported interpolation '" + interpolation + "'");
    }
    if (num_classes < 1) {
        throw std::invalid_argument("EvalConfig: num_classes must be >= 1");
    }
}

namespace {

bool in_range(double cx, double cy, double range) { return std::abs(cx) <= range && std::abs(cy) <= range; }

}  // namespace

std::optional<double> average_precision(const std::vector<std::vector<Detection>>& detections_per_scene,
                                        const std::vector<std::vector<GroundTruthBox>>& gt_per_scene,
                                        double iou_threshold, int class_id, double range_xy) {
    if (detections_per_scene.size() != gt_per_scene.size()) {
        throw std::invalid_argument("average_precision: scene count mismatch");
    }
    struct RankedDet {
        double score;
        int scene;
        int order;  // original index within the scene
        const Detection* det;
    };
    std::vector<RankedDet> ranked;
    std::vector<std::vector<const GroundTruthBox*>> gts(gt_per_scene.size());
    int total_gt = 0;
    for (std::size_t s = 0; s < gt_per_scene.size(); ++s) {
        for (const GroundTruthBox& g : gt_per_scene[s]) {
            if (g.class_id != class_id || !in_range(g.cx, g.cy, range_xy)) continue;
            gts[s].push_back(&g);
            ++total_gt;
        }
        int order = 0;
        for (const Detection& d : detections_per_scene[s]) {
            ++order;
            if (d.class_id != class_id || !in_range(d.box.cx, d.box.cy, range_xy)) continue;
            ranked.push_back(RankedDet{d.score, static_cast<int>(s), order, &d});
        }
    }
    if (total_gt == 0) {
        return std::nullopt;  // AP undefined for a class with no ground truth
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.scene != b.scene) return a.scene < b.scene;
        return a.order < b.order;
    });

    std::vector<std::vector<bool>> claimed(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s) claimed[s].assign(gts[s].size(), false);

    std::vector<double> precision;
    std::vector<double> recall;
    int tp = 0, fp = 0;
    for (const RankedDet& rd : ranked) {
        const auto& scene_gts = gts[static_cast<std::size_t>(rd.scene)];
        int best = -1;
        double best_iou = iou_threshold;
        for (std::size_t j = 0; j < scene_gts.size(); ++j) {
            if (claimed[static_cast<std::size_t>(rd.scene)][j]) continue;
            const double iou = rotated_bev_iou(rd.det->box.bev(), scene_gts[j]->bev());
            if (iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0) {
            claimed[static_cast<std::size_t>(rd.scene)][static_cast<std::size_t>(best)] = true;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }

    // all-point interpolation: integrate the precision envelope over recall
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        double envelope = precision[i];
        for (std::size_t j = i + 1; j < precision.size(); ++j) envelope = std::max(envelope, precision[j]);
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * envelope;
            prev_recall = recall[i];
        }
    }
    return ap;
}

std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<GroundTruthBox>& gt, double iou_threshold,
                                        int class_id, double range_xy) {
    return average_precision(std::vector<std::vector<Detection>>{detections},
                             std::vector<std::vector<GroundTruthBox>>{gt}, iou_threshold, class_id, range_xy);
}

MetricsReport evaluate_scenes(const std::vector<std::vector<Detection>>& detections_per_scene,
                              const std::vector<std::vector<GroundTruthBox>>& gt_per_scene,
                              const EvalConfig& cfg) {
    cfg.validate();
    MetricsReport report;
    report.thresholds = cfg.iou_thresholds;
    for (int cls = 0; cls < cfg.num_classes; ++cls) {
        std::vector<double> aps;
        bool present = true;
        for (double thr : cfg.iou_thresholds) {
            const auto ap = average_precision(detections_per_scene, gt_per_scene, thr, cls, cfg.range_xy);
            if (!ap.has_value()) {
                present = false;
                break;
            }
            aps.push_back(*ap);
        }
        if (present) report.per_class_ap[cls] = std::move(aps);
    }
    for (std::size_t t = 0; t < cfg.iou_thresholds.size(); ++t) {
        double acc = 0.0;
        int n = 0;
        for (const auto& [cls, aps] : report.per_class_ap) {
            acc += aps[t];
            ++n;
        }
        report.map_per_threshold.push_back(n == 0 ? 0.0 : acc / static_cast<double>(n));
    }
    return report;
}

namespace {

std::string threshold_suffix(double thr) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%02d", static_cast<int>(std::lround(thr * 10.0)));
    return buf;
}

nlohmann::ordered_json detection_to_json(const Detection& d) {
    nlohmann::ordered_json j;
    j["class"] = class_name(d.class_id);
    j["score"] = d.score;
    j["center"] = {d.box.cx, d.box.cy, d.box.cz};
    j["size"] = {d.box.length, d.box.width, d.box.height};
    j["yaw"] = d.box.yaw;
    return j;
}

}  // namespace

std::string metrics_report_to_json(const MetricsReport& report, const std::string& config_json_text) {
    nlohmann::ordered_json j;
    j["config"] = config_json_text.empty() ? nlohmann::ordered_json::object()
                                           : nlohmann::ordered_json::parse(config_json_text);
    nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
    for (const auto& [cls, aps] : report.per_class_ap) {
        nlohmann::ordered_json entry;
        for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
            entry["ap" + threshold_suffix(report.thresholds[t])] = aps[t];
        }
        per_class[class_name(cls)] = entry;
    }
    j["per_class"] = per_class;
    for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
        j["map" + threshold_suffix(report.thresholds[t])] = report.map_per_threshold[t];
    }
    nlohmann::ordered_json scenes = nlohmann::ordered_json::array();
    for (const SceneTrace& trace : report.per_scene) {
        nlohmann::ordered_json s;
        s["scene"] = trace.scene;
        s["stage_weights"] = trace.stage_weights;
        s["agent_weights"] = trace.agent_weights;
        nlohmann::ordered_json dets = nlohmann::ordered_json::array();
        for (const Detection& d : trace.detections) dets.push_back(detection_to_json(d));
        s["detections"] = dets;
        scenes.push_back(s);
    }
    j["per_scene"] = scenes;
    return j.dump(1) + "\n";
}

CompressionAdapter::CompressionAdapter(int channels, int ratio) : channels_(channels), ratio_(ratio) {
    if (channels < 1 || ratio < 1) {
        throw std::invalid_argument("CompressionAdapter: invalid sizes");
    }
    if (channels % ratio != 0) {
        throw std::invalid_argument("CompressionAdapter: channels " + std::to_string(channels) +
                                    " not divisible by ratio " + std::to_string(ratio));
    }
    if (ratio_ > 1) {
        const int bottleneck = channels / ratio;
        down = Parameter("compress.r" + std::to_string(ratio) + ".down", Tensor({bottleneck, channels, 1, 1}));
        up = Parameter("compress.r" + std::to_string(ratio) + ".up", Tensor({channels, bottleneck, 1, 1}));
    }
}

Tensor CompressionAdapter::apply(const Tensor& features) const {
    if (ratio_ == 1) {
        return features;  // identity contract: bit-identical passthrough
    }
    if (features.rank() != 3 || features.extent(0) != channels_) {
        throw std::invalid_argument("CompressionAdapter: expected [" + std::to_string(channels_) +
                                    ",H,W], got " + features.shape_str());
    }
    const Tensor zero_down({channels_ / ratio_});
    const Tensor zero_up({channels_});
    Tensor squeezed = conv2d(features, down.value, zero_down);
    return conv2d(squeezed, up.value, zero_up);
}

std::vector<Parameter*> CompressionAdapter::parameters() {
    if (ratio_ == 1) return {};
    return {&down, &up};
}

void CompressionAdapter::init(std::mt19937_64& rng) {
    if (ratio_ == 1) return;
    init_uniform(down, channels_, rng);
    init_uniform(up, channels_ / ratio_, rng);
}

std::string sweep_table_to_csv(const std::vector<SweepRow>& rows, const std::vector<double>& thresholds) {
    std::string out = "ratio";
    for (double thr : thresholds) out += ",map" + threshold_suffix(thr);
    out += "\n";
    for (const SweepRow& row : rows) {
        out += std::to_string(row.ratio);
        for (double v : row.map_per_threshold) {
            char buf[40];
            std::snprintf(buf, sizeof(buf), ",%.9g", v);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

}  // namespace focalcomm
