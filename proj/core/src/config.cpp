#include "focalcomm/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace focalcomm {

using nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
    if (batch_size < 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 0");
}

void RunConfig::validate() const {
    voxel.validate();
    him.validate();
    qaff.validate();
    head.validate();
    loss.validate();
    eval.validate();
    train.validate();
    for (int r : compression_ratios) {
        if (r < 1) throw std::invalid_argument("RunConfig: compression ratio must be >= 1");
    }
}

BevGrid RunConfig::bev_grid() const {
    BevGrid grid;
    grid.x_min = voxel.range_x[0];
    grid.y_min = voxel.range_y[0];
    grid.cell_size = voxel.voxel_size[0] * voxel.downsample;
    grid.height = voxel.bev_height();
    grid.width = voxel.bev_width();
    return grid;
}

namespace {

ordered_json scene_to_json(const SceneConfig& c) {
    ordered_json j;
    j["agent_count"] = c.agent_count;
    j["max_agents"] = c.max_agents;
    j["cars"] = c.cars;
    j["pedestrians"] = c.pedestrians;
    j["trucks"] = c.trucks;
    j["hard_pedestrian_fraction"] = c.hard_pedestrian_fraction;
    j["placement_range"] = c.placement_range;
    j["agent_spread"] = c.agent_spread;
    j["size_jitter"] = c.size_jitter;
    j["max_box_overlap_iou"] = c.max_box_overlap_iou;
    j["max_placement_retries"] = c.max_placement_retries;
    j["points_per_m2_at_10m"] = c.points_per_m2_at_10m;
    j["max_points_per_box"] = c.max_points_per_box;
    j["ground_clutter_per_m2"] = c.ground_clutter_per_m2;
    j["far_distance"] = c.far_distance;
    return j;
}

SceneConfig scene_from_json(const ordered_json& j) {
    SceneConfig c;
    c.agent_count = j.value("agent_count", c.agent_count);
    c.max_agents = j.value("max_agents", c.max_agents);
    c.cars = j.value("cars", c.cars);
    c.pedestrians = j.value("pedestrians", c.pedestrians);
    c.trucks = j.value("trucks", c.trucks);
    c.hard_pedestrian_fraction = j.value("hard_pedestrian_fraction", c.hard_pedestrian_fraction);
    c.placement_range = j.value("placement_range", c.placement_range);
    c.agent_spread = j.value("agent_spread", c.agent_spread);
    c.size_jitter = j.value("size_jitter", c.size_jitter);
    c.max_box_overlap_iou = j.value("max_box_overlap_iou", c.max_box_overlap_iou);
    c.max_placement_retries = j.value("max_placement_retries", c.max_placement_retries);
    c.points_per_m2_at_10m = j.value("points_per_m2_at_10m", c.points_per_m2_at_10m);
    c.max_points_per_box = j.value("max_points_per_box", c.max_points_per_box);
    c.ground_clutter_per_m2 = j.value("ground_clutter_per_m2", c.ground_clutter_per_m2);
    c.far_distance = j.value("far_distance", c.far_distance);
    return c;
}

ordered_json voxel_to_json(const VoxelConfig& c) {
    ordered_json j;
    j["voxel_size"] = c.voxel_size;
    j["range_x"] = c.range_x;
    j["range_y"] = c.range_y;
    j["range_z"] = c.range_z;
    j["max_points_per_voxel"] = c.max_points_per_voxel;
    j["downsample"] = c.downsample;
    j["channels"] = c.channels;
    j["hidden_channels"] = c.hidden_channels;
    return j;
}

VoxelConfig voxel_from_json(const ordered_json& j) {
    VoxelConfig c;
    if (j.contains("voxel_size")) c.voxel_size = j.at("voxel_size").get<std::array<double, 3>>();
    if (j.contains("range_x")) c.range_x = j.at("range_x").get<std::array<double, 2>>();
    if (j.contains("range_y")) c.range_y = j.at("range_y").get<std::array<double, 2>>();
    if (j.contains("range_z")) c.range_z = j.at("range_z").get<std::array<double, 2>>();
    c.max_points_per_voxel = j.value("max_points_per_voxel", c.max_points_per_voxel);
    c.downsample = j.value("downsample", c.downsample);
    c.channels = j.value("channels", c.channels);
    c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
    return c;
}

ordered_json him_to_json(const HimConfig& c) {
    ordered_json j;
    j["n_stages"] = c.n_stages;
    j["tau"] = c.tau;
    j["gamma"] = c.gamma;
    j["threshold_decay"] = c.threshold_decay;
    j["tau_iou"] = c.tau_iou;
    j["peak_kernel"] = c.peak_kernel;
    return j;
}

HimConfig him_from_json(const ordered_json& j) {
    HimConfig c;
    c.n_stages = j.value("n_stages", c.n_stages);
    c.tau = j.value("tau", c.tau);
    c.gamma = j.value("gamma", c.gamma);
    c.threshold_decay = j.value("threshold_decay", c.threshold_decay);
    c.tau_iou = j.value("tau_iou", c.tau_iou);
    c.peak_kernel = j.value("peak_kernel", c.peak_kernel);
    return c;
}

ordered_json qaff_to_json(const QaffConfig& c) {
    ordered_json j;
    j["heads"] = c.heads;
    j["model_dim"] = c.model_dim;
    return j;
}

QaffConfig qaff_from_json(const ordered_json& j) {
    QaffConfig c;
    c.heads = j.value("heads", c.heads);
    c.model_dim = j.value("model_dim", c.model_dim);
    return c;
}

ordered_json head_to_json(const HeadConfig& c) {
    ordered_json j;
    j["heads"] = c.heads;
    j["model_dim"] = c.model_dim;
    j["top_k"] = c.top_k;
    j["nms_iou"] = c.nms_iou;
    return j;
}

HeadConfig head_from_json(const ordered_json& j) {
    HeadConfig c;
    c.heads = j.value("heads", c.heads);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.top_k = j.value("top_k", c.top_k);
    c.nms_iou = j.value("nms_iou", c.nms_iou);
    return c;
}

ordered_json loss_to_json(const LossConfig& c) {
    ordered_json j;
    j["lambda_cls"] = c.lambda_cls;
    j["lambda_bbox"] = c.lambda_bbox;
    j["lambda_hm"] = c.lambda_hm;
    j["lambda_him"] = c.lambda_him;
    j["focal_alpha"] = c.focal_alpha;
    j["focal_gamma"] = c.focal_gamma;
    j["gaussian_min_overlap"] = c.gaussian_min_overlap;
    return j;
}

LossConfig loss_from_json(const ordered_json& j) {
    LossConfig c;
    c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
    c.lambda_bbox = j.value("lambda_bbox", c.lambda_bbox);
    c.lambda_hm = j.value("lambda_hm", c.lambda_hm);
    c.lambda_him = j.value("lambda_him", c.lambda_him);
    c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
    c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
    c.gaussian_min_overlap = j.value("gaussian_min_overlap", c.gaussian_min_overlap);
    return c;
}

ordered_json eval_to_json(const EvalConfig& c) {
    ordered_json j;
    j["iou_thresholds"] = c.iou_thresholds;
    j["range_xy"] = c.range_xy;
    j["interpolation"] = c.interpolation;
    return j;
}

EvalConfig eval_from_json(const ordered_json& j) {
    EvalConfig c;
    if (j.contains("iou_thresholds")) c.iou_thresholds = j.at("iou_thresholds").get<std::vector<double>>();
    c.range_xy = j.value("range_xy", c.range_xy);
    c.interpolation = j.value("interpolation", c.interpolation);
    return c;
}

ordered_json train_to_json(const TrainConfig& c) {
    ordered_json j;
    j["learning_rate"] = c.learning_rate;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    return j;
}

TrainConfig train_from_json(const ordered_json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    return c;
}

ordered_json ablation_to_json(const AblationConfig& c) {
    ordered_json j;
    j["him_enabled"] = c.him_enabled;
    j["qaff_enabled"] = c.qaff_enabled;
    j["collaboration_enabled"] = c.collaboration_enabled;
    return j;
}

AblationConfig ablation_from_json(const ordered_json& j) {
    AblationConfig c;
    c.him_enabled = j.value("him_enabled", c.him_enabled);
    c.qaff_enabled = j.value("qaff_enabled", c.qaff_enabled);
    c.collaboration_enabled = j.value("collaboration_enabled", c.collaboration_enabled);
    return c;
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) {
    ordered_json j;
    j["seed"] = cfg.seed;
    j["scene"] = scene_to_json(cfg.scene);
    j["voxel"] = voxel_to_json(cfg.voxel);
    j["him"] = him_to_json(cfg.him);
    j["qaff"] = qaff_to_json(cfg.qaff);
    j["head"] = head_to_json(cfg.head);
    j["loss"] = loss_to_json(cfg.loss);
    j["eval"] = eval_to_json(cfg.eval);
    j["train"] = train_to_json(cfg.train);
    j["ablation"] = ablation_to_json(cfg.ablation);
    j["compression_ratios"] = cfg.compression_ratios;
    return j.dump(1) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
    const ordered_json j = ordered_json::parse(text);
    RunConfig cfg;
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("scene")) cfg.scene = scene_from_json(j.at("scene"));
    if (j.contains("voxel")) cfg.voxel = voxel_from_json(j.at("voxel"));
    if (j.contains("him")) cfg.him = him_from_json(j.at("him"));
    if (j.contains("qaff")) cfg.qaff = qaff_from_json(j.at("qaff"));
    if (j.contains("head")) cfg.head = head_from_json(j.at("head"));
    if (j.contains("loss")) cfg.loss = loss_from_json(j.at("loss"));
    if (j.contains("eval")) cfg.eval = eval_from_json(j.at("eval"));
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
    if (j.contains("ablation")) cfg.ablation = ablation_from_json(j.at("ablation"));
    if (j.contains("compression_ratios")) {
        cfg.compression_ratios = j.at("compression_ratios").get<std::vector<int>>();
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_run_config: cannot open " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return run_config_from_json(buf.str());
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_run_config: cannot open " + path.string());
    }
    out << run_config_to_json(cfg);
}

bool operator==(const RunConfig& a, const RunConfig& b) {
    return run_config_to_json(a) == run_config_to_json(b);
}

}  // namespace focalcomm
