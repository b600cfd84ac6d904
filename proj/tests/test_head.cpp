#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "focalcomm/head.hpp"
#include "test_support.hpp"

using namespace focalcomm;
using fctest::random_tensor;

namespace {

HeadConfig tiny_cfg() {
    HeadConfig cfg;
    cfg.heads = 2;
    cfg.model_dim = 8;
    cfg.top_k = 4;
    return cfg;
}

BevGrid make_grid(int h, int w, double cell = 1.0) {
    BevGrid g;
    g.x_min = -0.5 * w * cell;
    g.y_min = -0.5 * h * cell;
    g.cell_size = cell;
    g.height = h;
    g.width = w;
    return g;
}

}  // namespace

TEST(Head, ZeroOffsetDecodeLandsOnCellCenter) {
    const BevGrid grid = make_grid(8, 8, 1.0);
    HeadOutput out;
    out.cells = {grid.flat(1, 5)};  // center (1.5 - 4, ...) with cell 1.0
    out.class_logits = Tensor({1, 3}, {3.0, -1.0, -2.0});
    // offsets zero, z = 0.8, dims at log of priors, yaw zero
    out.box_params = Tensor({1, 8}, {0.0, 0.0, 0.8, std::log(4.5), std::log(1.9), std::log(1.6), 0.0, 1.0});
    DetectionHead head(4, 0, tiny_cfg());
    const auto dets = head.decode(out, grid, 0.2);
    ASSERT_EQ(dets.size(), 1u);
    EXPECT_DOUBLE_EQ(dets[0].box.cx, grid.cell_center_x(5));
    EXPECT_DOUBLE_EQ(dets[0].box.cy, grid.cell_center_y(1));
    EXPECT_NEAR(dets[0].box.length, 4.5, 1e-12);
    EXPECT_NEAR(dets[0].box.width, 1.9, 1e-12);
    EXPECT_DOUBLE_EQ(dets[0].box.yaw, 0.0);
    EXPECT_EQ(dets[0].class_id, 0);
    EXPECT_NEAR(dets[0].score, 1.0 / (1.0 + std::exp(-3.0)), 1e-12);
}

TEST(Head, RotationDecodeViaAtan2) {
    const BevGrid grid = make_grid(4, 4);
    DetectionHead head(4, 0, tiny_cfg());
    HeadOutput out;
    out.cells = {0, 1};
    out.class_logits = Tensor({2, 3}, {2.0, 0.0, 0.0, 2.0, 0.0, 0.0});
    out.box_params = Tensor({2, 8},
                            {0, 0, 0, 0, 0, 0, 0.0, 1.0,    // sin=0, cos=1 -> yaw 0
                             0, 0, 0, 0, 0, 0, 1.0, 0.0});  // sin=1, cos=0 -> yaw pi/2
    const auto dets = head.decode(out, grid, 0.9);
    ASSERT_EQ(dets.size(), 2u);
    // both same score; deterministic order by cx
    EXPECT_NEAR(dets[0].box.yaw + dets[1].box.yaw, M_PI / 2.0, 1e-12);
    bool seen_zero = false, seen_half_pi = false;
    for (const auto& d : dets) {
        if (std::abs(d.box.yaw) < 1e-12) seen_zero = true;
        if (std::abs(d.box.yaw - M_PI / 2.0) < 1e-12) seen_half_pi = true;
    }
    EXPECT_TRUE(seen_zero);
    EXPECT_TRUE(seen_half_pi);
}

TEST(Head, DecodedSizesAlwaysPositive) {
    const BevGrid grid = make_grid(4, 4);
    DetectionHead head(4, 0, tiny_cfg());
    HeadOutput out;
    out.cells = {3};
    out.class_logits = Tensor({1, 3}, {0.5, 0.0, 0.0});
    out.box_params = Tensor({1, 8}, {0, 0, 0, -40.0, -7.3, 12.0, 0.3, 0.7});
    const auto dets = head.decode(out, grid, 0.2);
    ASSERT_EQ(dets.size(), 1u);
    EXPECT_GT(dets[0].box.length, 0.0);
    EXPECT_GT(dets[0].box.width, 0.0);
    EXPECT_GT(dets[0].box.height, 0.0);
}

TEST(Head, TopKSelectionByScoreWithRowMajorTies) {
    std::mt19937_64 rng(61);
    const int c = 4, h = 8, w = 8;
    DetectionHead head(c, 0, tiny_cfg());
    head.init(rng);
    // drive selection through a real forward: craft fused/ego so specific
    // cells dominate the heatmap; here just verify count, ordering, and
    // determinism contracts on the chosen cells
    Tensor fused = random_tensor({c, h, w}, rng);
    Tensor ego = random_tensor({c, h, w}, rng);
    const HeadOutput out = head.forward(fused, ego, nullptr, 4);
    EXPECT_LE(static_cast<int>(out.cells.size()), 4);
    EXPECT_GE(static_cast<int>(out.cells.size()), 1);
    EXPECT_EQ(out.class_logits.extent(0), static_cast<int>(out.cells.size()));
    EXPECT_EQ(out.box_params.extent(1), 8);
    const HeadOutput again = head.forward(fused, ego, nullptr, 4);
    EXPECT_EQ(out.cells, again.cells);
}

TEST(Head, TopKSortOracleOnConstructedHeatmap) {
    // three isolated peaks with sigma {0.9, 0.7, 0.2}: top_k=2 takes the two
    // highest; replicate the selection rule directly
    const int h = 9, w = 9;
    Tensor class_max({h, w});
    class_max.fill(-30.0);
    const auto logit = [](double s) { return std::log(s / (1.0 - s)); };
    class_max.at({1, 1}) = logit(0.9);
    class_max.at({4, 4}) = logit(0.7);
    class_max.at({7, 7}) = logit(0.2);
    const Tensor peaks = max_pool_peaks(class_max, 3);
    std::vector<int> cells;
    for (int i = 0; i < h * w; ++i) {
        if (peaks[i] == 1.0) cells.push_back(i);
    }
    std::stable_sort(cells.begin(), cells.end(), [&](int a, int b) {
        if (class_max[a] != class_max[b]) return class_max[a] > class_max[b];
        return a < b;
    });
    cells.resize(2);
    EXPECT_EQ(cells[0], 1 * w + 1);
    EXPECT_EQ(cells[1], 4 * w + 4);
}

TEST(Head, TopKBeyondGridRejected) {
    std::mt19937_64 rng(62);
    DetectionHead head(4, 0, tiny_cfg());
    head.init(rng);
    Tensor fused = random_tensor({4, 4, 4}, rng);
    Tensor ego = random_tensor({4, 4, 4}, rng);
    EXPECT_THROW(head.forward(fused, ego, nullptr, 17), std::invalid_argument);
}

TEST(Head, MiningQueryCompositionMatchesLayout) {
    std::mt19937_64 rng(63);
    const int c = 4, qc = 6, h = 6, w = 6;
    DetectionHead with_queries(c, qc, tiny_cfg());
    with_queries.init(rng);
    Tensor fused = random_tensor({c, h, w}, rng);
    Tensor ego = random_tensor({c, h, w}, rng);
    Tensor mining = random_tensor({qc, h, w}, rng);
    const HeadOutput out = with_queries.forward(fused, ego, &mining, 3);
    EXPECT_GE(static_cast<int>(out.cells.size()), 1);
    // mismatched usage is rejected both ways
    EXPECT_THROW(with_queries.forward(fused, ego, nullptr, 3), std::invalid_argument);
    DetectionHead without_queries(c, 0, tiny_cfg());
    without_queries.init(rng);
    EXPECT_THROW(without_queries.forward(fused, ego, &mining, 3), std::invalid_argument);
}

TEST(Head, RegressionTargetsRoundTripThroughDecode) {
    const BevGrid grid = make_grid(10, 10, 0.5);
    GroundTruthBox gt;
    gt.cx = 1.3;
    gt.cy = -0.9;
    gt.cz = 0.7;
    gt.length = 4.1;
    gt.width = 1.8;
    gt.height = 1.5;
    gt.yaw = 0.6;
    gt.class_id = kClassCar;
    const int cell = grid.flat(grid.cell_y(gt.cy), grid.cell_x(gt.cx));
    const auto targets = DetectionHead::regression_targets(gt, cell, grid);

    HeadOutput out;
    out.cells = {cell};
    out.class_logits = Tensor({1, 3}, {4.0, 0.0, 0.0});
    out.box_params = Tensor({1, 8}, std::vector<double>(targets.begin(), targets.end()));
    DetectionHead head(4, 0, tiny_cfg());
    const auto dets = head.decode(out, grid, 0.2);
    ASSERT_EQ(dets.size(), 1u);
    EXPECT_NEAR(dets[0].box.cx, gt.cx, 1e-12);
    EXPECT_NEAR(dets[0].box.cy, gt.cy, 1e-12);
    EXPECT_NEAR(dets[0].box.cz, gt.cz, 1e-12);
    EXPECT_NEAR(dets[0].box.length, gt.length, 1e-12);
    EXPECT_NEAR(dets[0].box.width, gt.width, 1e-12);
    EXPECT_NEAR(dets[0].box.yaw, gt.yaw, 1e-12);
}

TEST(Head, GradientsFlowToAllParameters) {
    std::mt19937_64 rng(64);
    const int c = 3, qc = 4, h = 5, w = 5;
    DetectionHead head(c, qc, tiny_cfg());
    head.init(rng);
    Tensor fused = random_tensor({c, h, w}, rng);
    Tensor ego = random_tensor({c, h, w}, rng);
    Tensor mining = random_tensor({qc, h, w}, rng);

    Tape tape;
    TapeScope scope(tape);
    for (Parameter* p : head.parameters()) tape.watch(*p);
    const HeadOutput out = head.forward(fused, ego, &mining, 3);
    Tensor loss = add(mean_all(mul(out.box_params, out.box_params)),
                      add(mean_all(mul(out.class_logits, out.class_logits)),
                          mean_all(mul(out.heatmap_logits, out.heatmap_logits))));
    tape.backward(loss);
    for (Parameter* p : head.parameters()) {
        double norm = 0.0;
        for (std::int64_t i = 0; i < p->grad.size(); ++i) norm += std::abs(p->grad[i]);
        EXPECT_GT(norm, 0.0) << p->name;
    }
}
