#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "focalcomm/qaff.hpp"
#include "test_support.hpp"

using namespace focalcomm;
using fctest::random_tensor;

namespace {

QaffConfig tiny_cfg(int heads = 2, int dim = 8) {
    QaffConfig cfg;
    cfg.heads = heads;
    cfg.model_dim = dim;
    return cfg;
}

struct FuseInputs {
    std::vector<std::vector<Tensor>> queries;  // [stage][agent]
    std::vector<Tensor> features;              // [agent]
};

FuseInputs random_inputs(int stages, int agents, int c, int h, int w, std::mt19937_64& rng) {
    FuseInputs in;
    in.queries.resize(static_cast<std::size_t>(stages));
    for (int s = 0; s < stages; ++s) {
        for (int i = 0; i < agents; ++i) {
            in.queries[static_cast<std::size_t>(s)].push_back(random_tensor({c, h, w}, rng));
        }
    }
    for (int i = 0; i < agents; ++i) in.features.push_back(random_tensor({c, h, w}, rng));
    return in;
}

}  // namespace

TEST(QaffConfig, RejectsIndivisibleModelDim) {
    QaffConfig cfg;
    cfg.heads = 3;
    cfg.model_dim = 8;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(CrossAgentAttention, SingleValidAgentIsValuePath) {
    std::mt19937_64 rng(41);
    const int c = 3, h = 2, w = 2;
    QaffModule qaff(c, 1, tiny_cfg(2, 6));
    qaff.init(rng);
    const Tensor query = random_tensor({c, h, w}, rng);
    const auto refined = qaff.cross_agent_attention({query}, {true});
    ASSERT_EQ(refined.size(), 1u);

    // attention over one token is weight 1: output = Wo(Wv x + bv) + bo
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::vector<double> token(static_cast<std::size_t>(c));
            for (int ch = 0; ch < c; ++ch) token[static_cast<std::size_t>(ch)] = query.at({ch, y, x});
            std::vector<double> v(6, 0.0);
            for (int j = 0; j < 6; ++j) {
                double acc = qaff.sa_value_b.value[j];
                for (int ch = 0; ch < c; ++ch) acc += token[static_cast<std::size_t>(ch)] * qaff.sa_value_w.value.at({ch, j});
                v[static_cast<std::size_t>(j)] = acc;
            }
            for (int ch = 0; ch < c; ++ch) {
                double acc = qaff.sa_out_b.value[ch];
                for (int j = 0; j < 6; ++j) acc += v[static_cast<std::size_t>(j)] * qaff.sa_out_w.value.at({j, ch});
                EXPECT_NEAR(refined[0].at({ch, y, x}), acc, 1e-12);
            }
        }
    }
}

TEST(CrossAgentAttention, InvalidAgentPerturbationLeavesValidOutputsBitIdentical) {
    std::mt19937_64 rng(42);
    const int c = 4, h = 3, w = 3;
    QaffModule qaff(c, 1, tiny_cfg());
    qaff.init(rng);
    Tensor qa = random_tensor({c, h, w}, rng);
    Tensor qb = random_tensor({c, h, w}, rng);
    Tensor qc = random_tensor({c, h, w}, rng);
    const std::vector<bool> valid = {true, false, true};

    const auto base = qaff.cross_agent_attention({qa, qb, qc}, valid);
    Tensor qb2 = random_tensor({c, h, w}, rng, -100.0, 100.0);
    const auto perturbed = qaff.cross_agent_attention({qa, qb2, qc}, valid);

    for (int i : {0, 2}) {
        for (std::int64_t j = 0; j < base[static_cast<std::size_t>(i)].size(); ++j) {
            EXPECT_EQ(base[static_cast<std::size_t>(i)][j], perturbed[static_cast<std::size_t>(i)][j]);
        }
    }
    // invalid agent's own output is exactly zero
    for (std::int64_t j = 0; j < base[1].size(); ++j) EXPECT_DOUBLE_EQ(base[1][j], 0.0);
}

TEST(CrossAgentAttention, MatchesHandComputedScalarAttention) {
    const int c = 2, h = 1, w = 1;
    QaffConfig cfg = tiny_cfg(1, 2);
    QaffModule qaff(c, 1, cfg);
    // identity projections, zero biases
    for (Parameter* p : qaff.parameters()) p->value.fill(0.0);
    qaff.sa_query_w.value.at({0, 0}) = 1.0;
    qaff.sa_query_w.value.at({1, 1}) = 1.0;
    qaff.sa_key_w.value.at({0, 0}) = 1.0;
    qaff.sa_key_w.value.at({1, 1}) = 1.0;
    qaff.sa_value_w.value.at({0, 0}) = 1.0;
    qaff.sa_value_w.value.at({1, 1}) = 1.0;
    qaff.sa_out_w.value.at({0, 0}) = 1.0;
    qaff.sa_out_w.value.at({1, 1}) = 1.0;

    Tensor qa({c, h, w}, {0.5, -1.0});
    Tensor qb({c, h, w}, {1.5, 0.25});
    const auto refined = qaff.cross_agent_attention({qa, qb}, {true, true});

    const double u0 = 0.5, u1 = -1.0, v0 = 1.5, v1 = 0.25;
    const double inv = 1.0 / std::sqrt(2.0);
    const double suu = (u0 * u0 + u1 * u1) * inv;
    const double suv = (u0 * v0 + u1 * v1) * inv;
    const double euu = std::exp(suu - std::max(suu, suv));
    const double euv = std::exp(suv - std::max(suu, suv));
    const double a_uu = euu / (euu + euv);
    const double a_uv = euv / (euu + euv);
    EXPECT_NEAR(refined[0].at({0, 0, 0}), a_uu * u0 + a_uv * v0, 1e-9);
    EXPECT_NEAR(refined[0].at({1, 0, 0}), a_uu * u1 + a_uv * v1, 1e-9);
}

TEST(CrossAgentAttention, NoValidAgentsRejected) {
    std::mt19937_64 rng(43);
    QaffModule qaff(2, 1, tiny_cfg(1, 2));
    qaff.init(rng);
    Tensor q = random_tensor({2, 2, 2}, rng);
    EXPECT_THROW(qaff.cross_agent_attention({q}, {false}), std::invalid_argument);
}

TEST(Fuse, SingleStageGivesUnitStageWeight) {
    std::mt19937_64 rng(44);
    const int c = 4, h = 4, w = 4;
    QaffModule qaff(c, 1, tiny_cfg());
    qaff.init(rng);
    auto in = random_inputs(1, 2, c, h, w, rng);
    const FusedFeatures out = qaff.fuse(in.queries, in.features, {true, true});
    ASSERT_EQ(out.stage_weights.size(), 1);
    EXPECT_DOUBLE_EQ(out.stage_weights[0], 1.0);
}

TEST(Fuse, IdenticalStagesGiveUniformWeights) {
    std::mt19937_64 rng(45);
    const int c = 4, h = 4, w = 4, stages = 3;
    QaffModule qaff(c, stages, tiny_cfg());
    qaff.init(rng);
    auto in = random_inputs(1, 2, c, h, w, rng);
    std::vector<std::vector<Tensor>> queries(static_cast<std::size_t>(stages), in.queries[0]);
    const FusedFeatures out = qaff.fuse(queries, in.features, {true, true});
    for (int s = 0; s < stages; ++s) EXPECT_NEAR(out.stage_weights[s], 1.0 / 3.0, 1e-12);
}

TEST(Fuse, NormalizationInvariants) {
    std::mt19937_64 rng(46);
    const int c = 4, h = 5, w = 5, stages = 2;
    QaffModule qaff(c, stages, tiny_cfg());
    qaff.init(rng);
    for (int trial = 0; trial < 25; ++trial) {
        const int agents = 1 + static_cast<int>(rng() % 4);
        auto in = random_inputs(stages, agents, c, h, w, rng);
        std::vector<bool> valid(static_cast<std::size_t>(agents), false);
        valid[0] = true;  // ego always valid
        for (int i = 1; i < agents; ++i) valid[static_cast<std::size_t>(i)] = (rng() % 2) == 0;
        const FusedFeatures out = qaff.fuse(in.queries, in.features, valid);

        double sw = 0.0;
        for (std::int64_t s = 0; s < out.stage_weights.size(); ++s) sw += out.stage_weights[s];
        EXPECT_NEAR(sw, 1.0, 1e-12);
        double aw = 0.0;
        for (int i = 0; i < agents; ++i) {
            if (valid[static_cast<std::size_t>(i)]) {
                aw += out.agent_weights[i];
                EXPECT_GT(out.agent_weights[i], 0.0);
            } else {
                EXPECT_DOUBLE_EQ(out.agent_weights[i], 0.0);
            }
        }
        EXPECT_NEAR(aw, 1.0, 1e-12);
        EXPECT_EQ(out.fused.shape(), (std::vector<int>{c, h, w}));
        EXPECT_TRUE(out.fused.all_finite());
    }
}

TEST(Fuse, SymmetricAgentsSplitEvenly) {
    std::mt19937_64 rng(47);
    const int c = 4, h = 4, w = 4;
    QaffModule qaff(c, 2, tiny_cfg());
    qaff.init(rng);
    auto in = random_inputs(2, 1, c, h, w, rng);
    // duplicate agent 0 into agent 1
    std::vector<std::vector<Tensor>> queries = {{in.queries[0][0], in.queries[0][0]},
                                                {in.queries[1][0], in.queries[1][0]}};
    std::vector<Tensor> features = {in.features[0], in.features[0]};
    const FusedFeatures two = qaff.fuse(queries, features, {true, true});
    EXPECT_NEAR(two.agent_weights[0], 0.5, 1e-12);
    EXPECT_NEAR(two.agent_weights[1], 0.5, 1e-12);

    const FusedFeatures one = qaff.fuse(in.queries, in.features, {true});
    for (std::int64_t i = 0; i < two.fused.size(); ++i) {
        EXPECT_NEAR(two.fused[i], one.fused[i], 1e-9);
    }
}

TEST(Fuse, InvalidAgentEqualsAbsentAgent) {
    std::mt19937_64 rng(48);
    const int c = 4, h = 4, w = 4, stages = 2;
    QaffModule qaff(c, stages, tiny_cfg());
    qaff.init(rng);
    auto in = random_inputs(stages, 2, c, h, w, rng);

    const FusedFeatures with_invalid = qaff.fuse(in.queries, in.features, {true, false});
    std::vector<std::vector<Tensor>> only_a = {{in.queries[0][0]}, {in.queries[1][0]}};
    const FusedFeatures alone = qaff.fuse(only_a, {in.features[0]}, {true});
    for (std::int64_t i = 0; i < with_invalid.fused.size(); ++i) {
        EXPECT_NEAR(with_invalid.fused[i], alone.fused[i], 1e-12);
    }
    EXPECT_DOUBLE_EQ(with_invalid.agent_weights[0], 1.0);
    EXPECT_DOUBLE_EQ(with_invalid.agent_weights[1], 0.0);
}

TEST(Fuse, InvalidAgentPerturbationBitIdentical) {
    std::mt19937_64 rng(49);
    const int c = 4, h = 4, w = 4, stages = 2;
    QaffModule qaff(c, stages, tiny_cfg());
    qaff.init(rng);
    auto in = random_inputs(stages, 3, c, h, w, rng);
    const std::vector<bool> valid = {true, true, false};
    const FusedFeatures base = qaff.fuse(in.queries, in.features, valid);

    auto perturbed = in;
    perturbed.features[2] = random_tensor({c, h, w}, rng, -50.0, 50.0);
    for (int s = 0; s < stages; ++s) {
        perturbed.queries[static_cast<std::size_t>(s)][2] = random_tensor({c, h, w}, rng, -50.0, 50.0);
    }
    const FusedFeatures out = qaff.fuse(perturbed.queries, perturbed.features, valid);
    for (std::int64_t i = 0; i < base.fused.size(); ++i) {
        EXPECT_EQ(base.fused[i], out.fused[i]);
    }
    for (std::int64_t i = 0; i < base.stage_weights.size(); ++i) {
        EXPECT_EQ(base.stage_weights[i], out.stage_weights[i]);
    }
}

TEST(Fuse, NonEgoPermutationLeavesFusedUnchanged) {
    std::mt19937_64 rng(50);
    const int c = 4, h = 4, w = 4, stages = 2;
    QaffModule qaff(c, stages, tiny_cfg());
    qaff.init(rng);
    auto in = random_inputs(stages, 3, c, h, w, rng);
    const FusedFeatures base = qaff.fuse(in.queries, in.features, {true, true, true});

    // swap non-ego agents 1 and 2 everywhere
    auto swapped = in;
    std::swap(swapped.features[1], swapped.features[2]);
    for (int s = 0; s < stages; ++s) {
        std::swap(swapped.queries[static_cast<std::size_t>(s)][1], swapped.queries[static_cast<std::size_t>(s)][2]);
    }
    const FusedFeatures out = qaff.fuse(swapped.queries, swapped.features, {true, true, true});
    for (std::int64_t i = 0; i < base.fused.size(); ++i) {
        EXPECT_NEAR(base.fused[i], out.fused[i], 1e-9);
    }
    // agent weights permute along with the agents
    EXPECT_NEAR(base.agent_weights[1], out.agent_weights[2], 1e-9);
    EXPECT_NEAR(base.agent_weights[2], out.agent_weights[1], 1e-9);
}

TEST(Fuse, GradientsFlowToAllParameters) {
    std::mt19937_64 rng(51);
    const int c = 3, h = 3, w = 3, stages = 2;
    QaffModule qaff(c, stages, tiny_cfg(2, 4));
    qaff.init(rng);
    auto in = random_inputs(stages, 2, c, h, w, rng);

    Tape tape;
    TapeScope scope(tape);
    for (Parameter* p : qaff.parameters()) tape.watch(*p);
    const FusedFeatures out = qaff.fuse(in.queries, in.features, {true, true});
    Tensor loss = add(mean_all(mul(out.fused, out.fused)), sum_all(mul(out.stage_weights, out.stage_weights)));
    tape.backward(loss);
    for (Parameter* p : qaff.parameters()) {
        double norm = 0.0;
        for (std::int64_t i = 0; i < p->grad.size(); ++i) norm += std::abs(p->grad[i]);
        EXPECT_GT(norm, 0.0) << p->name;
    }
}

TEST(Fuse, FiniteDifferenceGradients) {
    std::mt19937_64 rng(52);
    const int c = 2, h = 2, w = 2, stages = 2;
    QaffModule qaff(c, stages, tiny_cfg(1, 2));
    qaff.init(rng);
    auto in = random_inputs(stages, 2, c, h, w, rng);
    auto loss = [&] {
        const FusedFeatures out = qaff.fuse(in.queries, in.features, {true, true});
        return mean_all(mul(out.fused, out.fused));
    };
    std::vector<Parameter*> params = qaff.parameters();
    EXPECT_LT(fctest::max_grad_rel_err(loss, params, 1e-5), 1e-4);
}
