#pragma once

#include <random>
#include <vector>

#include "focalcomm/ops.hpp"
#include "focalcomm/tape.hpp"

namespace focalcomm {

struct QaffConfig {
    int heads = 8;
    int model_dim = 256;

    void validate() const;
};

struct FusedFeatures {
    Tensor fused;          // [C, H, W]
    Tensor stage_weights;  // [n_stages], sums to 1
    Tensor agent_weights;  // [N], sums to 1 over valid agents, exactly 0 elsewhere
};

/// Query-guided adaptive feature fusion across agents.
///
/// Per stage, agents' query maps attend to each other per BEV cell (agents as
/// tokens, invalid agents excluded by the mask and zeroed on output). Stage
/// importance weights come from a pooled linear scorer; the stage-weighted
/// query then cross-attends, per agent, over that agent's 3x3 spatial
/// key/value neighborhood. Agent weights pool the cross-attended maps and a
/// masked softmax mixes them into the fused output. No agent positional
/// encoding: permuting non-ego valid agents permutes outputs consistently.
class QaffModule {
public:
    QaffModule(int channels, int n_stages, const QaffConfig& cfg);

    /// stage_queries[s][i]: agent i's stage-s query map [C,H,W].
    /// agent_features[i]: agent i's BEV map [C,H,W].
    FusedFeatures fuse(const std::vector<std::vector<Tensor>>& stage_queries,
                       const std::vector<Tensor>& agent_features, const std::vector<bool>& valid) const;

    /// Per-cell multi-head self-attention over the agent axis for one stage.
    /// Outputs one refined map per agent; invalid agents' maps are zero.
    std::vector<Tensor> cross_agent_attention(const std::vector<Tensor>& queries,
                                              const std::vector<bool>& valid) const;

    std::vector<Parameter*> parameters();
    void init(std::mt19937_64& rng);

    int channels() const { return channels_; }
    int n_stages() const { return n_stages_; }

    // MHSA projections (shared across stages), [C,D] / [D] and [D,C] / [C].
    Parameter sa_query_w, sa_query_b;
    Parameter sa_key_w, sa_key_b;
    Parameter sa_value_w, sa_value_b;
    Parameter sa_out_w, sa_out_b;
    // stage scorer: pooled [C] -> scalar
    Parameter stage_score_w, stage_score_b;
    // MHCA projections as 1x1 conv kernels: [D,C,1,1] and output [C,D,1,1].
    Parameter ca_query_w, ca_query_b;
    Parameter ca_key_w, ca_key_b;
    Parameter ca_value_w, ca_value_b;
    Parameter ca_out_w, ca_out_b;
    // agent scorer: pooled [C] -> scalar
    Parameter agent_score_w, agent_score_b;

private:
    Tensor cross_attend_agent(const Tensor& query_map, const Tensor& features) const;

    int channels_;
    int n_stages_;
    QaffConfig cfg_;
};

}  // namespace focalcomm
