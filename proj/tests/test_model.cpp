#include <gtest/gtest.h>

#include <cmath>

#include "focalcomm/model.hpp"
#include "micro_config.hpp"

using namespace focalcomm;

namespace {

Scene micro_scene(std::uint64_t seed, const RunConfig& cfg) { return generate_scene(seed, cfg.scene); }

}  // namespace

TEST(ConfigRoundTrip, JsonIsStable) {
    RunConfig cfg = fctest::micro_config();
    cfg.compression_ratios = {1, 2, 4};
    const std::string text = run_config_to_json(cfg);
    const RunConfig parsed = run_config_from_json(text);
    EXPECT_TRUE(parsed == cfg);
    EXPECT_EQ(run_config_to_json(parsed), text);
}

TEST(ConfigRoundTrip, DefaultsMatchDeskScale) {
    const RunConfig cfg = run_config_from_json("{}");
    EXPECT_EQ(cfg.voxel.channels, 16);
    EXPECT_EQ(cfg.voxel.downsample, 8);
    EXPECT_EQ(cfg.him.n_stages, 3);
    EXPECT_NEAR(cfg.him.tau, 0.4, 1e-15);
    EXPECT_NEAR(cfg.him.gamma, 2.0, 1e-15);
    EXPECT_EQ(cfg.qaff.heads, 8);
    EXPECT_EQ(cfg.qaff.model_dim, 256);
    EXPECT_NEAR(cfg.loss.lambda_cls, 1.0, 1e-15);
    EXPECT_NEAR(cfg.loss.lambda_bbox, 2.0, 1e-15);
    EXPECT_NEAR(cfg.loss.lambda_hm, 1.0, 1e-15);
    EXPECT_NEAR(cfg.loss.lambda_him, 0.5, 1e-15);
    EXPECT_EQ(cfg.eval.iou_thresholds, (std::vector<double>{0.3, 0.5}));
    EXPECT_NEAR(cfg.eval.range_xy, 100.0, 1e-15);
}

TEST(Model, ForwardShapesAndDeterminism) {
    const RunConfig cfg = fctest::micro_config();
    FocalCommModel model(cfg);
    model.init();
    const Scene scene = micro_scene(3, cfg);

    const ForwardResult a = model.forward(scene, HimMode::Infer);
    EXPECT_EQ(a.agent_count, 2);
    EXPECT_EQ(a.grid.height, 32);
    EXPECT_EQ(a.grid.width, 32);
    EXPECT_EQ(a.him.size(), 2u);
    EXPECT_EQ(a.him[0].combined_query.extent(0), cfg.him.n_stages * cfg.voxel.channels);
    EXPECT_EQ(a.stage_weights.size(), 2);
    EXPECT_EQ(a.agent_weights.size(), 2);

    const ForwardResult b = model.forward(scene, HimMode::Infer);
    for (std::int64_t i = 0; i < a.head.heatmap_logits.size(); ++i) {
        EXPECT_EQ(a.head.heatmap_logits[i], b.head.heatmap_logits[i]);
    }
    EXPECT_EQ(a.head.cells, b.head.cells);
}

TEST(Model, LossFiniteAndBackwardPopulatesGradients) {
    const RunConfig cfg = fctest::micro_config();
    FocalCommModel model(cfg);
    model.init();
    const Scene scene = micro_scene(4, cfg);

    Tape tape;
    TapeScope scope(tape);
    for (Parameter* p : model.parameters()) tape.watch(*p);
    const ForwardResult fr = model.forward(scene, HimMode::Train);
    const SceneLoss loss = model.scene_loss(fr);
    EXPECT_TRUE(std::isfinite(loss.breakdown.total));
    EXPECT_GT(loss.breakdown.total, 0.0);
    EXPECT_EQ(loss.breakdown.him_per_stage.size(), 2u);
    tape.backward(loss.total);

    int with_grad = 0;
    for (Parameter* p : model.parameters()) {
        double norm = 0.0;
        for (std::int64_t i = 0; i < p->grad.size(); ++i) norm += std::abs(p->grad[i]);
        if (norm > 0.0) ++with_grad;
    }
    // every parameter should receive gradient on a non-degenerate scene
    EXPECT_EQ(with_grad, static_cast<int>(model.parameters().size()));
}

TEST(Model, AblationsChangeStructure) {
    RunConfig cfg = fctest::micro_config();
    cfg.ablation.him_enabled = false;
    FocalCommModel no_him(cfg);
    no_him.init();
    const Scene scene = micro_scene(5, cfg);
    const ForwardResult fr = no_him.forward(scene, HimMode::Infer);
    EXPECT_TRUE(fr.him.empty());
    EXPECT_EQ(fr.stage_weights.size(), 1);

    cfg = fctest::micro_config();
    cfg.ablation.qaff_enabled = false;
    FocalCommModel no_qaff(cfg);
    no_qaff.init();
    const ForwardResult fr2 = no_qaff.forward(scene, HimMode::Infer);
    // mean fusion: uniform agent weights
    EXPECT_NEAR(fr2.agent_weights[0], 0.5, 1e-15);
    EXPECT_NEAR(fr2.agent_weights[1], 0.5, 1e-15);

    cfg = fctest::micro_config();
    cfg.ablation.collaboration_enabled = false;
    FocalCommModel solo(cfg);
    solo.init();
    const ForwardResult fr3 = solo.forward(scene, HimMode::Infer);
    EXPECT_EQ(fr3.agent_count, 1);
}

TEST(Model, CheckpointRoundTrip) {
    const RunConfig cfg = fctest::micro_config();
    FocalCommModel model(cfg);
    model.init();
    const std::string ckpt = checkpoint_to_json(model);

    FocalCommModel other(cfg);
    other.init();
    // disturb, then restore
    for (Parameter* p : other.parameters()) p->value.fill(1.25);
    load_checkpoint_text(other, ckpt);
    auto pa = model.parameters();
    auto pb = other.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(pa[i]->name, pb[i]->name);
        for (std::int64_t j = 0; j < pa[i]->value.size(); ++j) {
            EXPECT_EQ(pa[i]->value[j], pb[i]->value[j]);
        }
    }
}

TEST(Model, IncompatibleCheckpointListsMismatches) {
    const RunConfig cfg = fctest::micro_config();
    FocalCommModel model(cfg);
    model.init();
    const std::string ckpt = checkpoint_to_json(model);

    RunConfig bigger = cfg;
    bigger.voxel.channels = 12;
    bigger.voxel.hidden_channels = 8;
    FocalCommModel other(bigger);
    other.init();
    try {
        load_checkpoint_text(other, ckpt);
        FAIL() << "expected incompatibility";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected"), std::string::npos);
        EXPECT_NE(msg.find("him.stage0.weight"), std::string::npos);
    }
}

TEST(Model, TrainingIsDeterministicAndLearns) {
    RunConfig cfg = fctest::micro_config();
    cfg.train.steps = 12;
    cfg.train.learning_rate = 0.02;
    std::vector<Scene> scenes;
    for (int i = 0; i < 2; ++i) scenes.push_back(micro_scene(100 + static_cast<std::uint64_t>(i), cfg));

    FocalCommModel a(cfg);
    a.init();
    const auto log_a = train_model(a, scenes);
    FocalCommModel b(cfg);
    b.init();
    const auto log_b = train_model(b, scenes);
    ASSERT_EQ(log_a.size(), 12u);
    for (std::size_t i = 0; i < log_a.size(); ++i) {
        EXPECT_EQ(log_a[i].loss.total, log_b[i].loss.total);
    }
    EXPECT_LT(log_a.back().loss.total, log_a.front().loss.total);
    EXPECT_EQ(train_log_to_json(log_a), train_log_to_json(log_b));
}

TEST(Model, CompressionPayloadDivisibilityEnforced) {
    RunConfig cfg = fctest::micro_config();
    // exchange payload: C * (1 + stages) = 8 * 3 = 24 channels
    cfg.compression_ratios = {5};
    EXPECT_THROW(FocalCommModel bad(cfg), std::invalid_argument);
    cfg.compression_ratios = {1, 2, 4, 8, 24};
    FocalCommModel good(cfg);
    good.init();
    const Scene scene = micro_scene(6, cfg);
    const ForwardResult fr = good.forward(scene, HimMode::Infer, 24);
    EXPECT_TRUE(fr.head.heatmap_logits.all_finite());
    EXPECT_THROW(good.forward(scene, HimMode::Infer, 3), std::invalid_argument);
}

TEST(Model, EvaluateProducesReportWithTraces) {
    RunConfig cfg = fctest::micro_config();
    FocalCommModel model(cfg);
    model.init();
    std::vector<Scene> scenes;
    std::vector<std::string> names;
    for (int i = 0; i < 3; ++i) {
        scenes.push_back(micro_scene(200 + static_cast<std::uint64_t>(i), cfg));
        names.push_back("scene_" + std::to_string(i) + ".json");
    }
    const MetricsReport report = evaluate_model(model, scenes, names);
    EXPECT_EQ(report.per_scene.size(), 3u);
    EXPECT_EQ(report.thresholds, cfg.eval.iou_thresholds);
    EXPECT_EQ(report.map_per_threshold.size(), 2u);
    // parallel evaluation matches serial bit for bit
    const MetricsReport parallel = evaluate_model(model, scenes, names, 1, 2);
    EXPECT_EQ(metrics_report_to_json(parallel, "{}"), metrics_report_to_json(report, "{}"));
}

TEST(Model, SweepRowsSortedAndDeduplicated) {
    RunConfig cfg = fctest::micro_config();
    cfg.compression_ratios = {1, 2, 4};
    FocalCommModel model(cfg);
    model.init();
    std::vector<Scene> scenes = {micro_scene(300, cfg)};
    const auto rows = sweep_model(model, scenes, {}, {4, 1, 2, 4, 1});
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].ratio, 1);
    EXPECT_EQ(rows[1].ratio, 2);
    EXPECT_EQ(rows[2].ratio, 4);
}
