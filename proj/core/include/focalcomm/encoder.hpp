#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "focalcomm/ops.hpp"
#include "focalcomm/scene.hpp"
#include "focalcomm/tape.hpp"

namespace focalcomm {

struct VoxelConfig {
    std::array<double, 3> voxel_size = {0.2, 0.2, 0.4};
    std::array<double, 2> range_x = {-102.4, 102.4};
    std::array<double, 2> range_y = {-102.4, 102.4};
    std::array<double, 2> range_z = {-10.0, 6.0};
    int max_points_per_voxel = 20;
    int downsample = 8;  // power-of-two stride from the voxel grid to the BEV grid
    int channels = 16;   // BEV feature channels C
    int hidden_channels = 8;

    void validate() const;
    int grid_x() const;  // voxel cells along x
    int grid_y() const;
    int grid_z() const;
    int bev_width() const { return grid_x() / downsample; }
    int bev_height() const { return grid_y() / downsample; }
};

/// One occupied voxel: its integer grid index and up to max_points_per_voxel
/// retained points.
struct Voxel {
    int ix = 0, iy = 0, iz = 0;
    std::vector<LidarPoint> points;
};

/// Deterministic voxelization. Points are pre-sorted lexicographically by
/// (x, y, z, intensity) so the per-voxel cap is permutation-invariant;
/// out-of-range points are dropped (half-open intervals on every axis).
/// Voxels are returned sorted by (ix, iy, iz).
std::vector<Voxel> voxelize(const std::vector<LidarPoint>& points, const VoxelConfig& cfg);

struct BEVFeatureMap {
    int agent_id = 0;
    Tensor features;  // [C, H, W]
    double cell_size_m = 0.0;
};

/// Shared voxel feature encoder: per-voxel descriptor (mean xyz offset from
/// the voxel center, mean intensity, count/max) -> linear + relu -> per-column
/// max over z -> strided conv stack down to [C, H, W].
class BevEncoder {
public:
    explicit BevEncoder(const VoxelConfig& cfg);

    /// Forward for one agent's voxel set. Differentiable w.r.t. parameters.
    Tensor encode(const std::vector<Voxel>& voxels, const VoxelConfig& cfg) const;

    std::vector<Parameter*> parameters();
    void init(std::mt19937_64& rng);

    static constexpr int kDescriptorDims = 5;

    Parameter point_weight;  // [5, hidden]
    Parameter point_bias;    // [hidden]
    struct ConvLayer {
        Parameter weight;  // [out, in, 3, 3]
        Parameter bias;    // [out]
        int stride = 2;
    };
    std::vector<ConvLayer> conv_stack;
};

/// Per-voxel descriptors as a [V, 5] tensor (V >= 1), in voxel order.
Tensor voxel_descriptors(const std::vector<Voxel>& voxels, const VoxelConfig& cfg);

}  // namespace focalcomm
