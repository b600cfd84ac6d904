#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "focalcomm/encoder.hpp"

using namespace focalcomm;

namespace {

VoxelConfig paper_config() {
    VoxelConfig cfg;
    cfg.range_x = {-100.0, 100.0};
    cfg.range_y = {-100.0, 100.0};
    cfg.range_z = {-10.0, 6.0};
    cfg.voxel_size = {0.2, 0.2, 0.4};
    cfg.max_points_per_voxel = 20;
    cfg.downsample = 8;
    return cfg;
}

VoxelConfig micro_config() {
    VoxelConfig cfg;
    cfg.range_x = {-6.4, 6.4};
    cfg.range_y = {-6.4, 6.4};
    cfg.range_z = {-2.0, 2.0};
    cfg.voxel_size = {0.2, 0.2, 0.4};
    cfg.downsample = 2;
    cfg.channels = 8;
    cfg.hidden_channels = 4;
    return cfg;
}

}  // namespace

TEST(Voxelize, OriginIndexFromPaperConstants) {
    VoxelConfig cfg = paper_config();
    // careful: downsample 8 on a 1000-cell grid is not divisible; shape-only config
    cfg.downsample = 1;
    const std::vector<LidarPoint> pts = {{0.0, 0.0, 0.0, 0.5}};
    const auto voxels = voxelize(pts, cfg);
    ASSERT_EQ(voxels.size(), 1u);
    EXPECT_EQ(voxels[0].ix, 500);
    EXPECT_EQ(voxels[0].iy, 500);
    EXPECT_EQ(voxels[0].iz, 25);
}

TEST(Voxelize, PointCapAtTwenty) {
    VoxelConfig cfg = paper_config();
    cfg.downsample = 1;
    std::vector<LidarPoint> pts;
    for (int i = 0; i < 25; ++i) pts.push_back({0.05, 0.05, 0.05, 0.1 + 0.01 * i});
    const auto voxels = voxelize(pts, cfg);
    ASSERT_EQ(voxels.size(), 1u);
    EXPECT_EQ(voxels[0].points.size(), 20u);
}

TEST(Voxelize, OutOfRangeDropped) {
    VoxelConfig cfg = paper_config();
    cfg.downsample = 1;
    const std::vector<LidarPoint> pts = {{101.0, 0.0, 0.0, 0.5}};
    EXPECT_TRUE(voxelize(pts, cfg).empty());
}

TEST(Voxelize, UpperBoundaryHalfOpen) {
    VoxelConfig cfg = paper_config();
    cfg.downsample = 1;
    const std::vector<LidarPoint> pts = {{100.0, 0.0, 0.0, 0.5}, {-100.0, 0.0, 0.0, 0.5}};
    const auto voxels = voxelize(pts, cfg);
    // exactly at range max -> dropped; exactly at range min -> kept at index 0
    ASSERT_EQ(voxels.size(), 1u);
    EXPECT_EQ(voxels[0].ix, 0);
}

TEST(Voxelize, PermutationInvariantIncludingCap) {
    VoxelConfig cfg = micro_config();
    cfg.max_points_per_voxel = 3;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    std::uniform_real_distribution<double> uz(-1.5, 1.5);
    std::vector<LidarPoint> pts;
    for (int i = 0; i < 200; ++i) pts.push_back({u(rng), u(rng), uz(rng), 0.5});
    // crowd one voxel well past the cap
    for (int i = 0; i < 10; ++i) pts.push_back({0.01 + 0.001 * i, 0.02, 0.1, 0.3});

    std::vector<LidarPoint> shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);

    const auto a = voxelize(pts, cfg);
    const auto b = voxelize(shuffled, cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].ix, b[i].ix);
        EXPECT_EQ(a[i].iy, b[i].iy);
        EXPECT_EQ(a[i].iz, b[i].iz);
        ASSERT_EQ(a[i].points.size(), b[i].points.size());
        for (std::size_t j = 0; j < a[i].points.size(); ++j) {
            EXPECT_EQ(a[i].points[j].x, b[i].points[j].x);
            EXPECT_EQ(a[i].points[j].y, b[i].points[j].y);
            EXPECT_EQ(a[i].points[j].z, b[i].points[j].z);
            EXPECT_EQ(a[i].points[j].intensity, b[i].points[j].intensity);
        }
    }
}

TEST(VoxelConfig, RejectsNonDivisibleRange) {
    VoxelConfig cfg = micro_config();
    cfg.range_x = {-6.45, 6.4};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(VoxelConfig, FullScaleShapesConstructible) {
    VoxelConfig full = paper_config();
    full.validate();
    EXPECT_EQ(full.grid_x(), 1000);
    EXPECT_EQ(full.grid_z(), 40);
    EXPECT_EQ(full.bev_width(), 125);  // (200 / 0.2) / 8
    VoxelConfig desk;  // power-of-two desk default
    desk.validate();
    EXPECT_EQ(desk.bev_width(), 128);
    EXPECT_EQ(desk.bev_height(), 128);
}

TEST(Encoder, EmptyCloudGivesZeroMap) {
    VoxelConfig cfg = micro_config();
    BevEncoder enc(cfg);
    std::mt19937_64 rng(3);
    enc.init(rng);
    const Tensor map = enc.encode({}, cfg);
    EXPECT_EQ(map.shape(), (std::vector<int>{8, 32, 32}));
    for (std::int64_t i = 0; i < map.size(); ++i) EXPECT_DOUBLE_EQ(map[i], 0.0);
}

TEST(Encoder, IdenticalCloudsGiveIdenticalMaps) {
    VoxelConfig cfg = micro_config();
    BevEncoder enc(cfg);
    std::mt19937_64 rng(4);
    enc.init(rng);
    std::vector<LidarPoint> pts;
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    for (int i = 0; i < 100; ++i) pts.push_back({u(rng), u(rng), 0.4, 0.5});
    const Tensor a = enc.encode(voxelize(pts, cfg), cfg);
    const Tensor b = enc.encode(voxelize(pts, cfg), cfg);
    for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Encoder, PointOrderDoesNotChangeResult) {
    VoxelConfig cfg = micro_config();
    cfg.max_points_per_voxel = 4;
    BevEncoder enc(cfg);
    std::mt19937_64 rng(5);
    enc.init(rng);
    std::vector<LidarPoint> pts;
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    for (int i = 0; i < 300; ++i) pts.push_back({u(rng), u(rng), 0.4, 0.5});
    std::vector<LidarPoint> shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const Tensor a = enc.encode(voxelize(pts, cfg), cfg);
    const Tensor b = enc.encode(voxelize(shuffled, cfg), cfg);
    for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Encoder, ShiftEquivarianceAwayFromBorders) {
    VoxelConfig cfg = micro_config();  // downsample 2, cell 0.4 m
    BevEncoder enc(cfg);
    std::mt19937_64 rng(6);
    enc.init(rng);
    std::vector<LidarPoint> pts;
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::uniform_real_distribution<double> uz(-1.0, 1.0);
    for (int i = 0; i < 200; ++i) pts.push_back({u(rng), u(rng), uz(rng), 0.5});

    const double cell = cfg.voxel_size[0] * cfg.downsample;
    std::vector<LidarPoint> shifted = pts;
    for (LidarPoint& p : shifted) p.x += cell;

    const Tensor a = enc.encode(voxelize(pts, cfg), cfg);
    const Tensor b = enc.encode(voxelize(shifted, cfg), cfg);
    const int c = a.extent(0), h = a.extent(1), w = a.extent(2);
    // compare interior: b[., y, x+1] == a[., y, x]
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 2; y < h - 2; ++y) {
            for (int x = 2; x < w - 3; ++x) {
                EXPECT_NEAR(b.at({ch, y, x + 1}), a.at({ch, y, x}), 1e-9);
            }
        }
    }
}

TEST(Encoder, GradientsFlowToAllParameters) {
    VoxelConfig cfg = micro_config();
    BevEncoder enc(cfg);
    std::mt19937_64 rng(7);
    enc.init(rng);
    std::vector<LidarPoint> pts;
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    for (int i = 0; i < 150; ++i) pts.push_back({u(rng), u(rng), 0.3, 0.5});
    const auto voxels = voxelize(pts, cfg);

    Tape tape;
    TapeScope scope(tape);
    for (Parameter* p : enc.parameters()) tape.watch(*p);
    Tensor loss = mean_all(mul(enc.encode(voxels, cfg), enc.encode(voxels, cfg)));
    tape.backward(loss);
    for (Parameter* p : enc.parameters()) {
        double norm = 0.0;
        for (std::int64_t i = 0; i < p->grad.size(); ++i) norm += std::abs(p->grad[i]);
        EXPECT_GT(norm, 0.0) << p->name;
    }
}
