#include "focalcomm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <tuple>

#include "focalcomm/init.hpp"

namespace focalcomm {

namespace {

int checked_cells(double lo, double hi, double step, const char* axis) {
    const double extent = hi - lo;
    if (extent <= 0.0 || step <= 0.0) {
        throw std::invalid_argument(std::string("VoxelConfig: invalid range/voxel size on ") + axis);
    }
    const double cells = extent / step;
    const double rounded = std::round(cells);
    if (std::abs(cells - rounded) > 1e-9) {
        throw std::invalid_argument(std::string("VoxelConfig: range not divisible by voxel size on ") + axis);
    }
    return static_cast<int>(rounded);
}

bool is_power_of_two(int v) { return v >= 1 && (v & (v - 1)) == 0; }

}  // namespace

void VoxelConfig::validate() const {
    checked_cells(range_x[0], range_x[1], voxel_size[0], "x");
    checked_cells(range_y[0], range_y[1], voxel_size[1], "y");
    checked_cells(range_z[0], range_z[1], voxel_size[2], "z");
    if (max_points_per_voxel < 1) {
        throw std::invalid_argument("VoxelConfig: max_points_per_voxel must be >= 1");
    }
    if (!is_power_of_two(downsample)) {
        throw std::invalid_argument("VoxelConfig: downsample must be a power of two");
    }
    if (grid_x() % downsample != 0 || grid_y() % downsample != 0) {
        throw std::invalid_argument("VoxelConfig: voxel grid not divisible by downsample");
    }
    if (channels < 1 || hidden_channels < 1) {
        throw std::invalid_argument("VoxelConfig: channel counts must be >= 1");
    }
}

int VoxelConfig::grid_x() const { return checked_cells(range_x[0], range_x[1], voxel_size[0], "x"); }
int VoxelConfig::grid_y() const { return checked_cells(range_y[0], range_y[1], voxel_size[1], "y"); }
int VoxelConfig::grid_z() const { return checked_cells(range_z[0], range_z[1], voxel_size[2], "z"); }

std::vector<Voxel> voxelize(const std::vector<LidarPoint>& points, const VoxelConfig& cfg) {
    cfg.validate();
    const int gx = cfg.grid_x(), gy = cfg.grid_y(), gz = cfg.grid_z();

    std::vector<LidarPoint> sorted = points;
    std::sort(sorted.begin(), sorted.end(), [](const LidarPoint& a, const LidarPoint& b) {
        return std::tie(a.x, a.y, a.z, a.intensity) < std::tie(b.x, b.y, b.z, b.intensity);
    });

    std::map<std::tuple<int, int, int>, Voxel> voxels;
    for (const LidarPoint& p : sorted) {
        const int ix = static_cast<int>(std::floor((p.x - cfg.range_x[0]) / cfg.voxel_size[0]));
        const int iy = static_cast<int>(std::floor((p.y - cfg.range_y[0]) / cfg.voxel_size[1]));
        const int iz = static_cast<int>(std::floor((p.z - cfg.range_z[0]) / cfg.voxel_size[2]));
        if (ix < 0 || ix >= gx || iy < 0 || iy >= gy || iz < 0 || iz >= gz) continue;
        Voxel& v = voxels[{ix, iy, iz}];
        if (v.points.empty()) {
            v.ix = ix;
            v.iy = iy;
            v.iz = iz;
        }
        if (static_cast<int>(v.points.size()) < cfg.max_points_per_voxel) {
            v.points.push_back(p);
        }
    }
    std::vector<Voxel> out;
    out.reserve(voxels.size());
    for (auto& [key, v] : voxels) out.push_back(std::move(v));
    return out;
}

Tensor voxel_descriptors(const std::vector<Voxel>& voxels, const VoxelConfig& cfg) {
    if (voxels.empty()) {
        throw std::invalid_argument("voxel_descriptors: empty voxel set");
    }
    const int v = static_cast<int>(voxels.size());
    Tensor out({v, BevEncoder::kDescriptorDims});
    for (int i = 0; i < v; ++i) {
        const Voxel& vox = voxels[static_cast<std::size_t>(i)];
        const double cx = cfg.range_x[0] + (vox.ix + 0.5) * cfg.voxel_size[0];
        const double cy = cfg.range_y[0] + (vox.iy + 0.5) * cfg.voxel_size[1];
        const double cz = cfg.range_z[0] + (vox.iz + 0.5) * cfg.voxel_size[2];
        double mx = 0.0, my = 0.0, mz = 0.0, mi = 0.0;
        for (const LidarPoint& p : vox.points) {
            mx += p.x;
            my += p.y;
            mz += p.z;
            mi += p.intensity;
        }
        const double n = static_cast<double>(vox.points.size());
        out.at({i, 0}) = mx / n - cx;
        out.at({i, 1}) = my / n - cy;
        out.at({i, 2}) = mz / n - cz;
        out.at({i, 3}) = mi / n;
        out.at({i, 4}) = n / static_cast<double>(cfg.max_points_per_voxel);
    }
    return out;
}

BevEncoder::BevEncoder(const VoxelConfig& cfg) {
    cfg.validate();
    point_weight = Parameter("encoder.point_weight", Tensor({kDescriptorDims, cfg.hidden_channels}));
    point_bias = Parameter("encoder.point_bias", Tensor({cfg.hidden_channels}));
    int layers = 0;
    for (int d = cfg.downsample; d > 1; d /= 2) ++layers;
    const int n_layers = std::max(1, layers);
    int in_ch = cfg.hidden_channels;
    for (int i = 0; i < n_layers; ++i) {
        ConvLayer layer;
        const int out_ch = cfg.channels;
        layer.weight = Parameter("encoder.conv" + std::to_string(i) + ".weight", Tensor({out_ch, in_ch, 3, 3}));
        layer.bias = Parameter("encoder.conv" + std::to_string(i) + ".bias", Tensor({out_ch}));
        layer.stride = layers == 0 ? 1 : 2;
        conv_stack.push_back(std::move(layer));
        in_ch = out_ch;
    }
}

Tensor BevEncoder::encode(const std::vector<Voxel>& voxels, const VoxelConfig& cfg) const {
    const int gy = cfg.grid_y(), gx = cfg.grid_x();
    if (voxels.empty()) {
        // empty input short-circuits to an exactly-zero map
        return Tensor({cfg.channels, cfg.bev_height(), cfg.bev_width()});
    }
    Tensor desc = voxel_descriptors(voxels, cfg);
    Tensor feats = relu(linear(desc, point_weight.value, point_bias.value));
    std::vector<int> cols;
    cols.reserve(voxels.size());
    for (const Voxel& v : voxels) cols.push_back(v.iy * gx + v.ix);
    Tensor x = scatter_max_columns(feats, cols, gy, gx);
    for (const ConvLayer& layer : conv_stack) {
        x = relu(conv2d(x, layer.weight.value, layer.bias.value, layer.stride));
    }
    return x;
}

std::vector<Parameter*> BevEncoder::parameters() {
    std::vector<Parameter*> out = {&point_weight, &point_bias};
    for (ConvLayer& layer : conv_stack) {
        out.push_back(&layer.weight);
        out.push_back(&layer.bias);
    }
    return out;
}

void BevEncoder::init(std::mt19937_64& rng) {
    init_uniform(point_weight, kDescriptorDims, rng);
    init_uniform(point_bias, kDescriptorDims, rng);
    for (ConvLayer& layer : conv_stack) {
        const int fan_in = layer.weight.value.extent(1) * 9;
        init_uniform(layer.weight, fan_in, rng);
        init_uniform(layer.bias, fan_in, rng);
    }
}

}  // namespace focalcomm
