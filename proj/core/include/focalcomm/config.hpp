#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "focalcomm/encoder.hpp"
#include "focalcomm/eval.hpp"
#include "focalcomm/head.hpp"
#include "focalcomm/him.hpp"
#include "focalcomm/loss.hpp"
#include "focalcomm/qaff.hpp"
#include "focalcomm/scene.hpp"

namespace focalcomm {

struct TrainConfig {
    double learning_rate = 0.01;
    int steps = 200;
    int batch_size = 0;  // 0: full batch; otherwise a round-robin mini batch

    void validate() const;
};

struct AblationConfig {
    bool him_enabled = true;
    bool qaff_enabled = true;
    bool collaboration_enabled = true;  // false: ego-only single-agent pipeline
};

/// Complete run configuration; serializes to and from JSON losslessly.
struct RunConfig {
    std::uint64_t seed = 7;
    SceneConfig scene;
    VoxelConfig voxel;
    HimConfig him;
    QaffConfig qaff;
    HeadConfig head;
    LossConfig loss;
    EvalConfig eval;
    TrainConfig train;
    AblationConfig ablation;
    std::vector<int> compression_ratios;  // empty: compression disabled

    void validate() const;
    BevGrid bev_grid() const;
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace focalcomm
