#include "focalcomm/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace focalcomm {

namespace {

struct Vec2 {
    double x, y;
};

}  // namespace

const char* agent_role_name(AgentRole role) {
    switch (role) {
        case AgentRole::Ego: return "ego";
        case AgentRole::Cav: return "cav";
        case AgentRole::Infrastructure: return "infrastructure";
    }
    return "ego";
}

AgentRole agent_role_from_name(const std::string& name) {
    if (name == "ego") return AgentRole::Ego;
    if (name == "cav") return AgentRole::Cav;
    if (name == "infrastructure") return AgentRole::Infrastructure;
    throw std::invalid_argument("unknown agent role: " + name);
}

const char* class_name(int class_id) {
    switch (class_id) {
        case kClassCar: return "car";
        case kClassPedestrian: return "pedestrian";
        case kClassTruck: return "truck";
        default: throw std::invalid_argument("unknown class id " + std::to_string(class_id));
    }
}

ClassPrior class_prior(int class_id) {
    switch (class_id) {
        case kClassCar: return {4.5, 1.9, 1.6};
        case kClassPedestrian: return {0.6, 0.6, 1.7};
        case kClassTruck: return {9.0, 2.6, 3.2};
        default: throw std::invalid_argument("unknown class id " + std::to_string(class_id));
    }
}

const AgentObservation& Scene::ego() const {
    for (const AgentObservation& a : agents) {
        if (a.role == AgentRole::Ego) return a;
    }
    throw std::runtime_error("scene has no ego agent");
}

double ray_box_entry(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
                     const GroundTruthBox& box) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    // into box-local frame: rotate xy by -yaw about the center
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const double ox = origin[0] - box.cx, oy = origin[1] - box.cy, oz = origin[2] - box.cz;
    const double lo[3] = {c * ox + s * oy, -s * ox + c * oy, oz};
    const double ld[3] = {c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]};
    const double half[3] = {0.5 * box.length, 0.5 * box.width, 0.5 * box.height};
    double t_enter = 0.0, t_exit = kInf;
    for (int axis = 0; axis < 3; ++axis) {
        if (ld[axis] == 0.0) {
            if (std::abs(lo[axis]) > half[axis]) return kInf;
            continue;
        }
        double t0 = (-half[axis] - lo[axis]) / ld[axis];
        double t1 = (half[axis] - lo[axis]) / ld[axis];
        if (t0 > t1) std::swap(t0, t1);
        t_enter = std::max(t_enter, t0);
        t_exit = std::min(t_exit, t1);
        if (t_enter > t_exit) return kInf;
    }
    return t_enter;
}

namespace {

bool point_visible(const Scene& scene, const std::array<double, 3>& sensor, const std::array<double, 3>& point) {
    const std::array<double, 3> d = {point[0] - sensor[0], point[1] - sensor[1], point[2] - sensor[2]};
    const double dist = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (dist < 1e-9) return true;
    const std::array<double, 3> dir = {d[0] / dist, d[1] / dist, d[2] / dist};
    for (const GroundTruthBox& box : scene.boxes) {
        const double t = ray_box_entry(sensor, dir, box);
        if (t < dist - 1e-6) return false;
    }
    return true;
}

double box_surface_area(const GroundTruthBox& b) {
    return 2.0 * b.length * b.height + 2.0 * b.width * b.height + b.length * b.width;
}

// Point on one of the four side faces or the top, area-weighted.
std::array<double, 3> sample_box_surface(const GroundTruthBox& b, std::mt19937_64& rng) {
    const double a_px = b.width * b.height;
    const double a_py = b.length * b.height;
    const double a_top = b.length * b.width;
    const double total = 2.0 * a_px + 2.0 * a_py + a_top;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double pick = uni(rng) * total;
    const double u = uni(rng), v = uni(rng);
    double lx, ly, lz;
    if (pick < a_px) {
        lx = 0.5 * b.length;
        ly = (u - 0.5) * b.width;
        lz = (v - 0.5) * b.height;
    } else if (pick < 2.0 * a_px) {
        lx = -0.5 * b.length;
        ly = (u - 0.5) * b.width;
        lz = (v - 0.5) * b.height;
    } else if (pick < 2.0 * a_px + a_py) {
        lx = (u - 0.5) * b.length;
        ly = 0.5 * b.width;
        lz = (v - 0.5) * b.height;
    } else if (pick < 2.0 * a_px + 2.0 * a_py) {
        lx = (u - 0.5) * b.length;
        ly = -0.5 * b.width;
        lz = (v - 0.5) * b.height;
    } else {
        lx = (u - 0.5) * b.length;
        ly = (v - 0.5) * b.width;
        lz = 0.5 * b.height;
    }
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    return {b.cx + c * lx - s * ly, b.cy + s * lx + c * ly, b.cz + lz};
}

double class_base_intensity(int class_id) {
    switch (class_id) {
        case kClassCar: return 0.55;
        case kClassPedestrian: return 0.35;
        case kClassTruck: return 0.70;
        default: return 0.5;
    }
}

}  // namespace

void populate_point_clouds(Scene& scene, const SceneConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (AgentObservation& agent : scene.agents) {
        agent.points.clear();
        const std::array<double, 3> sensor = {agent.pose_x, agent.pose_y, agent.sensor_height()};
        for (const GroundTruthBox& box : scene.boxes) {
            const double dist = std::max(1.0, std::hypot(box.cx - sensor[0], box.cy - sensor[1]));
            const double density = cfg.points_per_m2_at_10m * 100.0 / (dist * dist);
            int n = static_cast<int>(std::lround(box_surface_area(box) * density));
            n = std::clamp(n, 0, cfg.max_points_per_box);
            for (int i = 0; i < n; ++i) {
                const std::array<double, 3> p = sample_box_surface(box, rng);
                const double intensity = class_base_intensity(box.class_id) + 0.2 * (uni(rng) - 0.5);
                if (!point_visible(scene, sensor, p)) continue;
                agent.points.push_back(LidarPoint{p[0], p[1], p[2], intensity});
            }
        }
        const double side = 2.0 * cfg.placement_range;
        const int clutter = static_cast<int>(std::lround(cfg.ground_clutter_per_m2 * side * side));
        std::uniform_real_distribution<double> pos(-cfg.placement_range, cfg.placement_range);
        for (int i = 0; i < clutter; ++i) {
            const std::array<double, 3> p = {pos(rng), pos(rng), 0.0};
            const double intensity = 0.1 + 0.1 * uni(rng);
            if (!point_visible(scene, sensor, p)) continue;
            agent.points.push_back(LidarPoint{p[0], p[1], p[2], intensity});
        }
    }
}

namespace {

bool placement_ok(const Scene& scene, const GroundTruthBox& candidate, const SceneConfig& cfg) {
    for (const GroundTruthBox& other : scene.boxes) {
        if (rotated_bev_iou(candidate.bev(), other.bev()) > cfg.max_box_overlap_iou) return false;
    }
    for (const AgentObservation& agent : scene.agents) {
        if (std::hypot(candidate.cx - agent.pose_x, candidate.cy - agent.pose_y) < 3.0) return false;
    }
    return true;
}

GroundTruthBox make_box(int class_id, double cx, double cy, double yaw, const SceneConfig& cfg,
                        std::mt19937_64& rng) {
    std::uniform_real_distribution<double> jitter(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
    const ClassPrior prior = class_prior(class_id);
    GroundTruthBox box;
    box.class_id = class_id;
    box.length = prior.length * jitter(rng);
    box.width = prior.width * jitter(rng);
    box.height = prior.height * jitter(rng);
    box.cx = cx;
    box.cy = cy;
    box.cz = 0.5 * box.height;
    box.yaw = wrap_angle(yaw);
    return box;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
    if (cfg.agent_count < 1 || cfg.agent_count > cfg.max_agents) {
        throw std::invalid_argument("generate_scene: agent_count must be in [1, max_agents]");
    }
    if (cfg.cars < 0 || cfg.pedestrians < 0 || cfg.trucks < 0) {
        throw std::invalid_argument("generate_scene: class counts must be >= 0");
    }
    Scene scene;
    scene.seed = seed;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    // agents: index 0 is always the ego
    for (int i = 0; i < cfg.agent_count; ++i) {
        AgentObservation agent;
        agent.agent_id = i;
        if (i == 0) {
            agent.role = AgentRole::Ego;
            agent.pose_x = (uni(rng) - 0.5) * 6.0;
            agent.pose_y = (uni(rng) - 0.5) * 6.0;
            agent.pose_yaw = wrap_angle((uni(rng) - 0.5) * 2.0 * M_PI);
        } else {
            agent.role = (cfg.agent_count >= 3 && i == cfg.agent_count - 1) ? AgentRole::Infrastructure
                                                                            : AgentRole::Cav;
            const double angle = uni(rng) * 2.0 * M_PI;
            const double radius = cfg.agent_spread * (0.6 + 0.5 * uni(rng));
            agent.pose_x = radius * std::cos(angle);
            agent.pose_y = radius * std::sin(angle);
            agent.pose_yaw = wrap_angle((uni(rng) - 0.5) * 2.0 * M_PI);
        }
        scene.agents.push_back(agent);
    }

    const auto place_plain = [&](int class_id) {
        for (int attempt = 0; attempt < cfg.max_placement_retries; ++attempt) {
            const double cx = (uni(rng) * 2.0 - 1.0) * cfg.placement_range;
            const double cy = (uni(rng) * 2.0 - 1.0) * cfg.placement_range;
            const double yaw = (uni(rng) - 0.5) * 2.0 * M_PI;
            GroundTruthBox box = make_box(class_id, cx, cy, yaw, cfg, rng);
            if (placement_ok(scene, box, cfg)) {
                scene.boxes.push_back(box);
                return;
            }
        }
        throw std::runtime_error("generate_scene: placement failed after retries for seed " +
                                 std::to_string(seed));
    };

    for (int i = 0; i < cfg.cars; ++i) place_plain(kClassCar);
    for (int i = 0; i < cfg.trucks; ++i) place_plain(kClassTruck);

    std::vector<int> truck_indices;
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
        if (scene.boxes[i].class_id == kClassTruck) truck_indices.push_back(static_cast<int>(i));
    }
    const AgentObservation& ego = scene.agents.front();
    const bool far_possible = cfg.placement_range > cfg.far_distance + 2.0;

    const auto place_behind_truck = [&]() -> bool {
        if (truck_indices.empty()) return false;
        for (int attempt = 0; attempt < cfg.max_placement_retries; ++attempt) {
            const std::size_t pick = std::min<std::size_t>(
                truck_indices.size() - 1, static_cast<std::size_t>(uni(rng) * static_cast<double>(truck_indices.size())));
            const GroundTruthBox& truck = scene.boxes[static_cast<std::size_t>(truck_indices[pick])];
            double dx = truck.cx - ego.pose_x;
            double dy = truck.cy - ego.pose_y;
            const double d = std::hypot(dx, dy);
            if (d < 1e-6) continue;
            dx /= d;
            dy /= d;
            const double behind = 0.5 * std::hypot(truck.length, truck.width) + 0.8 + 1.5 * uni(rng);
            const double lateral = (uni(rng) - 0.5) * 1.2;
            const double cx = truck.cx + dx * behind - dy * lateral;
            const double cy = truck.cy + dy * behind + dx * lateral;
            if (std::abs(cx) > cfg.placement_range || std::abs(cy) > cfg.placement_range) continue;
            const double yaw = (uni(rng) - 0.5) * 2.0 * M_PI;
            GroundTruthBox box = make_box(kClassPedestrian, cx, cy, yaw, cfg, rng);
            if (placement_ok(scene, box, cfg)) {
                scene.boxes.push_back(box);
                return true;
            }
        }
        return false;
    };

    const auto place_far = [&]() -> bool {
        if (!far_possible) return false;
        for (int attempt = 0; attempt < cfg.max_placement_retries; ++attempt) {
            const double angle = uni(rng) * 2.0 * M_PI;
            const double radius = cfg.far_distance + uni(rng) * (cfg.placement_range - cfg.far_distance);
            const double cx = ego.pose_x + radius * std::cos(angle);
            const double cy = ego.pose_y + radius * std::sin(angle);
            if (std::abs(cx) > cfg.placement_range || std::abs(cy) > cfg.placement_range) continue;
            const double yaw = (uni(rng) - 0.5) * 2.0 * M_PI;
            GroundTruthBox box = make_box(kClassPedestrian, cx, cy, yaw, cfg, rng);
            if (placement_ok(scene, box, cfg)) {
                scene.boxes.push_back(box);
                return true;
            }
        }
        return false;
    };

    for (int i = 0; i < cfg.pedestrians; ++i) {
        const bool hard = uni(rng) < cfg.hard_pedestrian_fraction;
        bool placed = false;
        if (hard) {
            const bool prefer_far = far_possible && (truck_indices.empty() || uni(rng) < 0.5);
            placed = prefer_far ? place_far() : place_behind_truck();
            if (!placed) placed = prefer_far ? place_behind_truck() : place_far();
        }
        if (!placed) place_plain(kClassPedestrian);
    }

    populate_point_clouds(scene, cfg, rng);
    return scene;
}

Scene to_ego_frame(const Scene& scene) {
    const AgentObservation& ego = scene.ego();
    const double ex = ego.pose_x, ey = ego.pose_y, eyaw = ego.pose_yaw;
    const double c = std::cos(-eyaw), s = std::sin(-eyaw);
    const auto map_xy = [&](double x, double y) {
        const double dx = x - ex, dy = y - ey;
        return Vec2{c * dx - s * dy, s * dx + c * dy};
    };
    Scene out;
    out.seed = scene.seed;
    out.agents.reserve(scene.agents.size());
    for (const AgentObservation& a : scene.agents) {
        AgentObservation t = a;
        const Vec2 p = map_xy(a.pose_x, a.pose_y);
        t.pose_x = p.x;
        t.pose_y = p.y;
        t.pose_yaw = wrap_angle(a.pose_yaw - eyaw);
        for (std::size_t i = 0; i < a.points.size(); ++i) {
            const Vec2 q = map_xy(a.points[i].x, a.points[i].y);
            t.points[i].x = q.x;
            t.points[i].y = q.y;
        }
        out.agents.push_back(std::move(t));
    }
    out.boxes.reserve(scene.boxes.size());
    for (const GroundTruthBox& b : scene.boxes) {
        GroundTruthBox t = b;
        const Vec2 p = map_xy(b.cx, b.cy);
        t.cx = p.x;
        t.cy = p.y;
        t.yaw = wrap_angle(b.yaw - eyaw);
        out.boxes.push_back(t);
    }
    return out;
}

namespace {

void append_number(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    out += buf;
}

}  // namespace

std::string scene_to_json(const Scene& scene) {
    std::string out;
    out.reserve(1 << 16);
    out += "{\n\"seed\": " + std::to_string(scene.seed) + ",\n\"agents\": [\n";
    for (std::size_t ai = 0; ai < scene.agents.size(); ++ai) {
        const AgentObservation& a = scene.agents[ai];
        out += "{\"id\": " + std::to_string(a.agent_id) + ", \"role\": \"" + agent_role_name(a.role) +
               "\", \"pose\": [";
        append_number(out, a.pose_x);
        out += ", ";
        append_number(out, a.pose_y);
        out += ", ";
        append_number(out, a.pose_yaw);
        out += "], \"points\": [";
        for (std::size_t pi = 0; pi < a.points.size(); ++pi) {
            if (pi) out += ",";
            append_number(out, a.points[pi].x);
            out += ",";
            append_number(out, a.points[pi].y);
            out += ",";
            append_number(out, a.points[pi].z);
            out += ",";
            append_number(out, a.points[pi].intensity);
        }
        out += "]}";
        if (ai + 1 < scene.agents.size()) out += ",";
        out += "\n";
    }
    out += "],\n\"boxes\": [\n";
    for (std::size_t bi = 0; bi < scene.boxes.size(); ++bi) {
        const GroundTruthBox& b = scene.boxes[bi];
        out += "{\"center\": [";
        append_number(out, b.cx);
        out += ", ";
        append_number(out, b.cy);
        out += ", ";
        append_number(out, b.cz);
        out += "], \"size\": [";
        append_number(out, b.length);
        out += ", ";
        append_number(out, b.width);
        out += ", ";
        append_number(out, b.height);
        out += "], \"yaw\": ";
        append_number(out, b.yaw);
        out += ", \"class\": " + std::to_string(b.class_id) + "}";
        if (bi + 1 < scene.boxes.size()) out += ",";
        out += "\n";
    }
    out += "]\n}\n";
    return out;
}

Scene scene_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    Scene scene;
    scene.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& ja : j.at("agents")) {
        AgentObservation a;
        a.agent_id = ja.at("id").get<int>();
        a.role = agent_role_from_name(ja.at("role").get<std::string>());
        const auto& pose = ja.at("pose");
        a.pose_x = pose.at(0).get<double>();
        a.pose_y = pose.at(1).get<double>();
        a.pose_yaw = pose.at(2).get<double>();
        const auto& pts = ja.at("points");
        if (pts.size() % 4 != 0) {
            throw std::invalid_argument("scene_from_json: points array length not divisible by 4");
        }
        a.points.reserve(pts.size() / 4);
        for (std::size_t i = 0; i < pts.size(); i += 4) {
            a.points.push_back(LidarPoint{pts.at(i).get<double>(), pts.at(i + 1).get<double>(),
                                          pts.at(i + 2).get<double>(), pts.at(i + 3).get<double>()});
        }
        scene.agents.push_back(std::move(a));
    }
    for (const auto& jb : j.at("boxes")) {
        GroundTruthBox b;
        const auto& center = jb.at("center");
        b.cx = center.at(0).get<double>();
        b.cy = center.at(1).get<double>();
        b.cz = center.at(2).get<double>();
        const auto& size = jb.at("size");
        b.length = size.at(0).get<double>();
        b.width = size.at(1).get<double>();
        b.height = size.at(2).get<double>();
        b.yaw = jb.at("yaw").get<double>();
        b.class_id = jb.at("class").get<int>();
        scene.boxes.push_back(b);
    }
    return scene;
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_scene: cannot open " + path.string());
    }
    out << scene_to_json(scene);
    if (!out) {
        throw std::runtime_error("save_scene: write failed for " + path.string());
    }
}

Scene load_scene(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_scene: cannot open " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return scene_from_json(buf.str());
}

}  // namespace focalcomm
