#include "focalcomm/qaff.hpp"

#include <cmath>
#include <stdexcept>

#include "focalcomm/init.hpp"

namespace focalcomm {

void QaffConfig::validate() const {
    if (heads < 1 || model_dim < 1 || model_dim % heads != 0) {
        throw std::invalid_argument("QaffConfig: model_dim must be positive and divisible by heads");
    }
}

QaffModule::QaffModule(int channels, int n_stages, const QaffConfig& cfg)
    : channels_(channels), n_stages_(n_stages), cfg_(cfg) {
    cfg_.validate();
    if (channels < 1 || n_stages < 1) {
        throw std::invalid_argument("QaffModule: invalid sizes");
    }
    const int d = cfg_.model_dim;
    sa_query_w = Parameter("qaff.sa.query.weight", Tensor({channels, d}));
    sa_query_b = Parameter("qaff.sa.query.bias", Tensor({d}));
    sa_key_w = Parameter("qaff.sa.key.weight", Tensor({channels, d}));
    sa_key_b = Parameter("qaff.sa.key.bias", Tensor({d}));
    sa_value_w = Parameter("qaff.sa.value.weight", Tensor({channels, d}));
    sa_value_b = Parameter("qaff.sa.value.bias", Tensor({d}));
    sa_out_w = Parameter("qaff.sa.out.weight", Tensor({d, channels}));
    sa_out_b = Parameter("qaff.sa.out.bias", Tensor({channels}));
    stage_score_w = Parameter("qaff.stage_score.weight", Tensor({channels, 1}));
    stage_score_b = Parameter("qaff.stage_score.bias", Tensor({1}));
    ca_query_w = Parameter("qaff.ca.query.weight", Tensor({d, channels, 1, 1}));
    ca_query_b = Parameter("qaff.ca.query.bias", Tensor({d}));
    ca_key_w = Parameter("qaff.ca.key.weight", Tensor({d, channels, 1, 1}));
    ca_key_b = Parameter("qaff.ca.key.bias", Tensor({d}));
    ca_value_w = Parameter("qaff.ca.value.weight", Tensor({d, channels, 1, 1}));
    ca_value_b = Parameter("qaff.ca.value.bias", Tensor({d}));
    ca_out_w = Parameter("qaff.ca.out.weight", Tensor({channels, d, 1, 1}));
    ca_out_b = Parameter("qaff.ca.out.bias", Tensor({channels}));
    agent_score_w = Parameter("qaff.agent_score.weight", Tensor({channels, 1}));
    agent_score_b = Parameter("qaff.agent_score.bias", Tensor({1}));
}

std::vector<Parameter*> QaffModule::parameters() {
    return {&sa_query_w, &sa_query_b, &sa_key_w,       &sa_key_b,       &sa_value_w, &sa_value_b,
            &sa_out_w,   &sa_out_b,   &stage_score_w,  &stage_score_b,  &ca_query_w, &ca_query_b,
            &ca_key_w,   &ca_key_b,   &ca_value_w,     &ca_value_b,     &ca_out_w,   &ca_out_b,
            &agent_score_w, &agent_score_b};
}

void QaffModule::init(std::mt19937_64& rng) {
    const int d = cfg_.model_dim;
    init_uniform(sa_query_w, channels_, rng);
    init_uniform(sa_query_b, channels_, rng);
    init_uniform(sa_key_w, channels_, rng);
    init_uniform(sa_key_b, channels_, rng);
    init_uniform(sa_value_w, channels_, rng);
    init_uniform(sa_value_b, channels_, rng);
    init_uniform(sa_out_w, d, rng);
    init_uniform(sa_out_b, d, rng);
    init_uniform(stage_score_w, channels_, rng);
    init_uniform(stage_score_b, channels_, rng);
    init_uniform(ca_query_w, channels_, rng);
    init_uniform(ca_query_b, channels_, rng);
    init_uniform(ca_key_w, channels_, rng);
    init_uniform(ca_key_b, channels_, rng);
    init_uniform(ca_value_w, channels_, rng);
    init_uniform(ca_value_b, channels_, rng);
    init_uniform(ca_out_w, d, rng);
    init_uniform(ca_out_b, d, rng);
    init_uniform(agent_score_w, channels_, rng);
    init_uniform(agent_score_b, channels_, rng);
}

namespace {

// [C,H,W] -> [H*W, 1, C]
Tensor map_to_tokens(const Tensor& map) {
    const int h = map.extent(1), w = map.extent(2), c = map.extent(0);
    return reshape(permute(map, {1, 2, 0}), {h * w, 1, c});
}

// [H*W, C] -> [C,H,W]
Tensor tokens_to_map(const Tensor& tokens, int h, int w) {
    const int c = tokens.extent(1);
    return permute(reshape(tokens, {h, w, c}), {2, 0, 1});
}

// mean over valid agents and all cells -> [C]
Tensor pooled_mean(const std::vector<Tensor>& maps, const std::vector<bool>& valid) {
    Tensor acc;
    int count = 0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (!valid[i]) continue;
        Tensor m = scale(sum_axis(sum_axis(maps[i], 2), 1),
                         1.0 / (static_cast<double>(maps[i].extent(1)) * maps[i].extent(2)));
        acc = count == 0 ? m : add(acc, m);
        ++count;
    }
    return scale(acc, 1.0 / static_cast<double>(count));
}

}  // namespace

std::vector<Tensor> QaffModule::cross_agent_attention(const std::vector<Tensor>& queries,
                                                      const std::vector<bool>& valid) const {
    const int n = static_cast<int>(queries.size());
    if (n == 0 || valid.size() != queries.size()) {
        throw std::invalid_argument("cross_agent_attention: agent count mismatch");
    }
    int n_valid = 0;
    for (bool v : valid) n_valid += v ? 1 : 0;
    if (n_valid == 0) {
        throw std::invalid_argument("cross_agent_attention: no valid agents");
    }
    const int h = queries[0].extent(1), w = queries[0].extent(2);
    for (const Tensor& q : queries) {
        if (q.rank() != 3 || q.extent(0) != channels_ || q.extent(1) != h || q.extent(2) != w) {
            throw std::invalid_argument("cross_agent_attention: inconsistent query shapes");
        }
    }
    const int heads = cfg_.heads;
    const int d = cfg_.model_dim;
    const int dh = d / heads;
    const int hw = h * w;

    std::vector<Tensor> token_rows;
    token_rows.reserve(queries.size());
    for (const Tensor& q : queries) token_rows.push_back(map_to_tokens(q));
    Tensor tokens = concat(token_rows, 1);  // [HW, N, C]

    Tensor valid_mask({n});
    Tensor keep({n, 1});
    for (int i = 0; i < n; ++i) {
        valid_mask[i] = valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        keep[i] = valid_mask[i];
    }

    Tensor q = add(bmm(tokens, sa_query_w.value), sa_query_b.value);  // [HW, N, D]
    Tensor k = add(bmm(tokens, sa_key_w.value), sa_key_b.value);
    Tensor v = add(bmm(tokens, sa_value_w.value), sa_value_b.value);
    const auto split_heads = [&](const Tensor& t) {
        return permute(reshape(t, {hw, n, heads, dh}), {0, 2, 1, 3});  // [HW, h, N, dh]
    };
    Tensor qh = split_heads(q);
    Tensor kh = split_heads(k);
    Tensor vh = split_heads(v);
    Tensor scores = scale(bmm(qh, permute(kh, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = masked_softmax(scores, valid_mask, -1);  // mask over the key axis
    Tensor ctx = bmm(attn, vh);                            // [HW, h, N, dh]
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {hw, n, d});
    Tensor out = add(bmm(merged, sa_out_w.value), sa_out_b.value);  // [HW, N, C]
    out = mul(out, keep);                                           // zero invalid agents

    std::vector<Tensor> refined;
    refined.reserve(queries.size());
    for (int i = 0; i < n; ++i) {
        refined.push_back(tokens_to_map(reshape(slice(out, 1, i, 1), {hw, channels_}), h, w));
    }
    return refined;
}

Tensor QaffModule::cross_attend_agent(const Tensor& query_map, const Tensor& features) const {
    const int h = query_map.extent(1), w = query_map.extent(2);
    const int heads = cfg_.heads;
    const int d = cfg_.model_dim;
    const int dh = d / heads;

    Tensor qd = conv2d(query_map, ca_query_w.value, ca_query_b.value);
    Tensor kd = conv2d(features, ca_key_w.value, ca_key_b.value);
    Tensor vd = conv2d(features, ca_value_w.value, ca_value_b.value);

    // 3x3 neighborhood offsets; border cells attend over in-bounds tokens only
    std::vector<std::pair<int, int>> offsets;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) offsets.push_back({dy, dx});
    const int n_off = static_cast<int>(offsets.size());

    Tensor validity({n_off, h, w});
    for (int o = 0; o < n_off; ++o) {
        const auto [dy, dx] = offsets[static_cast<std::size_t>(o)];
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const int ny = y + dy, nx = x + dx;
                validity[(static_cast<std::int64_t>(o) * h + y) * w + x] =
                    (ny >= 0 && ny < h && nx >= 0 && nx < w) ? 1.0 : 0.0;
            }
        }
    }

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int head = 0; head < heads; ++head) {
        Tensor qh = slice(qd, 0, head * dh, dh);
        Tensor kh = slice(kd, 0, head * dh, dh);
        Tensor vh = slice(vd, 0, head * dh, dh);
        std::vector<Tensor> score_rows;
        score_rows.reserve(static_cast<std::size_t>(n_off));
        for (const auto& [dy, dx] : offsets) {
            Tensor shifted = shift2d(kh, -dy, -dx);  // shifted[y,x] = kh[y+dy, x+dx]
            Tensor dot = scale(sum_axis(mul(qh, shifted), 0), inv_sqrt_dh);  // [H,W]
            score_rows.push_back(reshape(dot, {1, h, w}));
        }
        Tensor scores = concat(score_rows, 0);  // [9,H,W]
        Tensor attn = masked_softmax(scores, validity, 0);
        Tensor ctx;
        for (int o = 0; o < n_off; ++o) {
            const auto [dy, dx] = offsets[static_cast<std::size_t>(o)];
            Tensor weighted = mul(shift2d(vh, -dy, -dx), slice(attn, 0, o, 1));
            ctx = o == 0 ? weighted : add(ctx, weighted);
        }
        head_outputs.push_back(ctx);  // [dh,H,W]
    }
    Tensor merged = concat(head_outputs, 0);  // [D,H,W]
    return conv2d(merged, ca_out_w.value, ca_out_b.value);
}

FusedFeatures QaffModule::fuse(const std::vector<std::vector<Tensor>>& stage_queries,
                               const std::vector<Tensor>& agent_features,
                               const std::vector<bool>& valid) const {
    if (static_cast<int>(stage_queries.size()) != n_stages_) {
        throw std::invalid_argument("QaffModule::fuse: stage count mismatch");
    }
    const int n = static_cast<int>(agent_features.size());
    if (n == 0 || valid.size() != agent_features.size()) {
        throw std::invalid_argument("QaffModule::fuse: agent count mismatch");
    }
    int n_valid = 0;
    for (bool v : valid) n_valid += v ? 1 : 0;
    if (n_valid == 0) {
        throw std::invalid_argument("QaffModule::fuse: no valid agents");
    }
    const int h = agent_features[0].extent(1);
    const int w = agent_features[0].extent(2);

    // stage-wise cross-agent refinement
    std::vector<std::vector<Tensor>> refined;
    refined.reserve(stage_queries.size());
    for (const std::vector<Tensor>& queries : stage_queries) {
        if (queries.size() != agent_features.size()) {
            throw std::invalid_argument("QaffModule::fuse: per-stage agent count mismatch");
        }
        refined.push_back(cross_agent_attention(queries, valid));
    }

    // stage importance weights
    Tensor stage_weights;
    if (n_stages_ == 1) {
        stage_weights = Tensor({1}, {1.0});
    } else {
        std::vector<Tensor> scores;
        scores.reserve(refined.size());
        for (const std::vector<Tensor>& maps : refined) {
            scores.push_back(linear(pooled_mean(maps, valid), stage_score_w.value, stage_score_b.value));
        }
        stage_weights = softmax(concat(scores, 0), 0);
    }

    // unified query: stage-weighted mean over valid agents
    Tensor unified;
    for (int s = 0; s < n_stages_; ++s) {
        Tensor stage_mix;
        int count = 0;
        for (int i = 0; i < n; ++i) {
            if (!valid[static_cast<std::size_t>(i)]) continue;
            stage_mix = count == 0 ? refined[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]
                                   : add(stage_mix, refined[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
            ++count;
        }
        stage_mix = scale(stage_mix, 1.0 / static_cast<double>(count));
        Tensor weighted = mul(stage_mix, slice(stage_weights, 0, s, 1));
        unified = s == 0 ? weighted : add(unified, weighted);
    }

    // per-agent cross-attention from the unified query into agent features
    std::vector<Tensor> cross(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        cross[static_cast<std::size_t>(i)] = cross_attend_agent(unified, agent_features[static_cast<std::size_t>(i)]);
    }

    // agent weights over valid agents
    std::vector<Tensor> agent_scores;
    agent_scores.reserve(static_cast<std::size_t>(n));
    Tensor valid_mask({n});
    for (int i = 0; i < n; ++i) {
        valid_mask[i] = valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        if (valid[static_cast<std::size_t>(i)]) {
            Tensor pooled = scale(sum_axis(sum_axis(cross[static_cast<std::size_t>(i)], 2), 1),
                                  1.0 / (static_cast<double>(h) * w));
            agent_scores.push_back(linear(pooled, agent_score_w.value, agent_score_b.value));
        } else {
            agent_scores.push_back(Tensor({1}, {0.0}));  // masked out below
        }
    }
    Tensor agent_weights = masked_softmax(concat(agent_scores, 0), valid_mask, 0);

    // weighted fusion over valid agents
    Tensor fused;
    bool first = true;
    for (int i = 0; i < n; ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        Tensor weighted = mul(cross[static_cast<std::size_t>(i)], slice(agent_weights, 0, i, 1));
        fused = first ? weighted : add(fused, weighted);
        first = false;
    }

    FusedFeatures out;
    out.fused = std::move(fused);
    out.stage_weights = std::move(stage_weights);
    out.agent_weights = std::move(agent_weights);
    return out;
}

}  // namespace focalcomm
