#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "focalcomm/geometry.hpp"

namespace focalcomm {

enum class AgentRole { Ego, Cav, Infrastructure };

constexpr int kClassCar = 0;
constexpr int kClassPedestrian = 1;
constexpr int kClassTruck = 2;
constexpr int kNumClasses = 3;

const char* agent_role_name(AgentRole role);
AgentRole agent_role_from_name(const std::string& name);
const char* class_name(int class_id);

struct LidarPoint {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double intensity = 0.0;
};

struct AgentObservation {
    int agent_id = 0;
    AgentRole role = AgentRole::Ego;
    double pose_x = 0.0;
    double pose_y = 0.0;
    double pose_yaw = 0.0;
    std::vector<LidarPoint> points;

    double sensor_height() const { return role == AgentRole::Infrastructure ? 5.0 : 1.8; }
};

struct GroundTruthBox {
    double cx = 0.0, cy = 0.0, cz = 0.0;
    double length = 0.0, width = 0.0, height = 0.0;
    double yaw = 0.0;  // (-pi, pi]
    int class_id = kClassCar;

    OrientedBox bev() const { return OrientedBox{cx, cy, length, width, yaw}; }
};

/// Per-class size priors (length, width, height) in meters.
struct ClassPrior {
    double length, width, height;
};
ClassPrior class_prior(int class_id);

struct SceneConfig {
    int agent_count = 3;  // ego + collaborators, <= max_agents
    int max_agents = 4;
    int cars = 4;
    int pedestrians = 3;
    int trucks = 1;
    double hard_pedestrian_fraction = 0.5;
    double placement_range = 48.0;   // box centers within +/- range (meters)
    double agent_spread = 28.0;      // collaborator distance scale from origin
    double size_jitter = 0.1;        // +/- fraction on class prior dims
    double max_box_overlap_iou = 0.1;
    int max_placement_retries = 200;
    double points_per_m2_at_10m = 8.0;  // surface sampling density at 10 m
    int max_points_per_box = 400;
    double ground_clutter_per_m2 = 0.01;
    double far_distance = 60.0;  // "far" hard-pedestrian threshold
};

struct Scene {
    std::uint64_t seed = 0;
    std::vector<AgentObservation> agents;
    std::vector<GroundTruthBox> boxes;

    const AgentObservation& ego() const;
};

/// Deterministic scene synthesis: pure in (seed, cfg). Throws std::runtime_error
/// (reporting the seed) if box placement fails after bounded retries.
Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg);

/// Rigidly transforms every point, pose, and box into the ego frame; the ego
/// pose becomes (0, 0, 0).
Scene to_ego_frame(const Scene& scene);

/// Synthesizes per-agent point clouds for already-placed boxes and agent
/// poses: box surface samples with per-agent ray occlusion and 1/d^2 density
/// falloff, plus ground clutter.
void populate_point_clouds(Scene& scene, const SceneConfig& cfg, std::mt19937_64& rng);

/// First t >= 0 where the ray origin + t*dir enters the (yawed, z-extruded)
/// box, or +inf if it misses. `dir` need not be normalized.
double ray_box_entry(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
                     const GroundTruthBox& box);

// Scene file format: JSON with 9-significant-digit numbers so regeneration is
// byte-identical.
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

}  // namespace focalcomm
