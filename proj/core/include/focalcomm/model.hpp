#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "focalcomm/config.hpp"
#include "focalcomm/encoder.hpp"
#include "focalcomm/eval.hpp"
#include "focalcomm/head.hpp"
#include "focalcomm/him.hpp"
#include "focalcomm/loss.hpp"
#include "focalcomm/qaff.hpp"

namespace focalcomm {

struct ForwardResult {
    HeadOutput head;
    std::vector<HimResult> him;      // per used agent; empty when mining is ablated
    Tensor stage_weights;            // [S]
    Tensor agent_weights;            // [N] over used agents
    std::vector<GroundTruthBox> gt;  // ego-frame ground truth
    BevGrid grid;
    int agent_count = 0;
    std::vector<int> agent_ids;  // ids of the used agents, ego first
};

struct InferenceResult {
    std::vector<Detection> detections;
    std::vector<double> stage_weights;
    std::vector<double> agent_weights;
    std::vector<GroundTruthBox> gt;  // ego-frame ground truth of the scene
};

/// The full pipeline: shared encoder, per-agent mining, compression of the
/// exchanged payload (non-ego features + query maps), query-guided fusion,
/// and the anchor-free head. Ablation switches select the built structure.
class FocalCommModel {
public:
    explicit FocalCommModel(const RunConfig& cfg);

    const RunConfig& config() const { return cfg_; }

    std::vector<Parameter*> parameters();
    void init();  // deterministic from cfg.seed
    void zero_grad();
    void sgd_step(double learning_rate);

    ForwardResult forward(const Scene& scene, HimMode mode, int compression_ratio = 1) const;
    SceneLoss scene_loss(const ForwardResult& result) const;
    InferenceResult infer(const Scene& scene, int compression_ratio = 1) const;

    /// Channel count of the per-agent exchanged payload.
    int exchange_channels() const;

    const HimModule* him() const { return him_.get(); }
    const QaffModule* qaff() const { return qaff_.get(); }

private:
    const CompressionAdapter& adapter_for(int ratio) const;

    RunConfig cfg_;
    BevEncoder encoder_;
    std::unique_ptr<HimModule> him_;
    std::unique_ptr<QaffModule> qaff_;
    std::unique_ptr<DetectionHead> head_;
    std::vector<CompressionAdapter> adapters_;
};

struct TrainLogEntry {
    int step = 0;
    LossBreakdown loss;
};

/// Full-batch SGD over the scene set; when compression ratios are configured
/// the adapters are trained jointly, stepping round-robin through the ratios.
/// Aborts (reporting the step index) if the loss stops being finite.
std::vector<TrainLogEntry> train_model(FocalCommModel& model, const std::vector<Scene>& scenes);

std::string train_log_to_json(const std::vector<TrainLogEntry>& log);

// Checkpoints carry the config and every named parameter tensor.
std::string checkpoint_to_json(FocalCommModel& model);
void save_checkpoint(FocalCommModel& model, const std::filesystem::path& path);
void load_checkpoint_text(FocalCommModel& model, const std::string& json_text);
void load_checkpoint(FocalCommModel& model, const std::filesystem::path& path);
RunConfig checkpoint_config(const std::filesystem::path& path);

/// Runs inference over scenes (scene-parallel when jobs > 1; aggregation is
/// in fixed scene order) and computes the metrics report with traces.
MetricsReport evaluate_model(const FocalCommModel& model, const std::vector<Scene>& scenes,
                             const std::vector<std::string>& scene_names, int compression_ratio = 1,
                             int jobs = 1);

/// Evaluates every ratio (deduplicated, ascending) on the same scenes.
std::vector<SweepRow> sweep_model(const FocalCommModel& model, const std::vector<Scene>& scenes,
                                  const std::vector<std::string>& scene_names, std::vector<int> ratios,
                                  int jobs = 1);

}  // namespace focalcomm
