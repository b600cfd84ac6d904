#include "focalcomm/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

namespace focalcomm {

FocalCommModel::FocalCommModel(const RunConfig& cfg) : cfg_(cfg), encoder_(cfg.voxel) {
    cfg_.validate();
    const int c = cfg_.voxel.channels;
    const int stages = cfg_.ablation.him_enabled ? cfg_.him.n_stages : 1;
    if (cfg_.ablation.him_enabled) {
        him_ = std::make_unique<HimModule>(c, cfg_.him.n_stages);
    }
    if (cfg_.ablation.qaff_enabled) {
        qaff_ = std::make_unique<QaffModule>(c, stages, cfg_.qaff);
    }
    const int him_query_channels = cfg_.ablation.him_enabled ? cfg_.him.n_stages * c : 0;
    head_ = std::make_unique<DetectionHead>(c, him_query_channels, cfg_.head);

    std::set<int> ratios(cfg_.compression_ratios.begin(), cfg_.compression_ratios.end());
    for (int ratio : ratios) {
        if (ratio == 1) continue;
        if (exchange_channels() % ratio != 0) {
            throw std::invalid_argument("FocalCommModel: exchange payload of " +
                                        std::to_string(exchange_channels()) +
                                        " channels is not divisible by compression ratio " +
                                        std::to_string(ratio));
        }
        adapters_.emplace_back(exchange_channels(), ratio);
    }
}

int FocalCommModel::exchange_channels() const {
    const int c = cfg_.voxel.channels;
    return cfg_.ablation.him_enabled ? c * (1 + cfg_.him.n_stages) : c;
}

const CompressionAdapter& FocalCommModel::adapter_for(int ratio) const {
    for (const CompressionAdapter& a : adapters_) {
        if (a.ratio() == ratio) return a;
    }
    throw std::invalid_argument("FocalCommModel: no compression adapter for ratio " + std::to_string(ratio) +
                                " (configure it in compression_ratios before training)");
}

std::vector<Parameter*> FocalCommModel::parameters() {
    std::vector<Parameter*> out = encoder_.parameters();
    if (him_) {
        for (Parameter* p : him_->parameters()) out.push_back(p);
    }
    if (qaff_) {
        for (Parameter* p : qaff_->parameters()) out.push_back(p);
    }
    for (Parameter* p : head_->parameters()) out.push_back(p);
    for (CompressionAdapter& a : adapters_) {
        for (Parameter* p : a.parameters()) out.push_back(p);
    }
    return out;
}

void FocalCommModel::init() {
    std::mt19937_64 rng(cfg_.seed);
    encoder_.init(rng);
    if (him_) him_->init(rng);
    if (qaff_) qaff_->init(rng);
    head_->init(rng);
    for (CompressionAdapter& a : adapters_) a.init(rng);
}

void FocalCommModel::zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
}

void FocalCommModel::sgd_step(double learning_rate) {
    for (Parameter* p : parameters()) {
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            p->value[i] -= learning_rate * p->grad[i];
        }
    }
}

ForwardResult FocalCommModel::forward(const Scene& scene, HimMode mode, int compression_ratio) const {
    const Scene ego_scene = to_ego_frame(scene);
    const BevGrid grid = cfg_.bev_grid();

    // participating agents; the ego comes first
    std::vector<const AgentObservation*> agents;
    for (const AgentObservation& a : ego_scene.agents) {
        if (a.role == AgentRole::Ego) agents.push_back(&a);
    }
    if (agents.empty()) {
        throw std::invalid_argument("FocalCommModel::forward: scene has no ego agent");
    }
    if (cfg_.ablation.collaboration_enabled) {
        for (const AgentObservation& a : ego_scene.agents) {
            if (a.role != AgentRole::Ego) agents.push_back(&a);
        }
    }
    const int n = static_cast<int>(agents.size());
    const int c = cfg_.voxel.channels;
    const int stages = cfg_.ablation.him_enabled ? cfg_.him.n_stages : 1;

    // shared encoder per agent
    std::vector<Tensor> features;
    features.reserve(static_cast<std::size_t>(n));
    for (const AgentObservation* a : agents) {
        features.push_back(encoder_.encode(voxelize(a->points, cfg_.voxel), cfg_.voxel));
    }

    // local mining at every agent (pre-exchange)
    std::vector<HimResult> him_results;
    if (him_) {
        him_results.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            him_results.push_back(him_->run(features[static_cast<std::size_t>(i)],
                                            mode == HimMode::Train ? &ego_scene.boxes : nullptr, cfg_.him, mode,
                                            grid));
        }
    }

    // exchanged payload: non-ego features (+ query maps), optionally squeezed
    // through the ratio's channel bottleneck
    std::vector<Tensor> rx_features = features;
    std::vector<Tensor> rx_queries;  // combined query map per agent
    if (him_) {
        for (int i = 0; i < n; ++i) rx_queries.push_back(him_results[static_cast<std::size_t>(i)].combined_query);
    }
    if (compression_ratio != 1) {
        const CompressionAdapter& adapter = adapter_for(compression_ratio);
        for (int i = 1; i < n; ++i) {
            Tensor payload = him_ ? concat({features[static_cast<std::size_t>(i)],
                                            him_results[static_cast<std::size_t>(i)].combined_query},
                                           0)
                                  : features[static_cast<std::size_t>(i)];
            Tensor restored = adapter.apply(payload);
            rx_features[static_cast<std::size_t>(i)] = slice(restored, 0, 0, c);
            if (him_) {
                rx_queries[static_cast<std::size_t>(i)] = slice(restored, 0, c, stages * c);
            }
        }
    }

    // fusion
    Tensor fused;
    Tensor stage_weights;
    Tensor agent_weights;
    if (qaff_) {
        std::vector<std::vector<Tensor>> stage_queries(static_cast<std::size_t>(stages));
        for (int s = 0; s < stages; ++s) {
            for (int i = 0; i < n; ++i) {
                stage_queries[static_cast<std::size_t>(s)].push_back(
                    him_ ? slice(rx_queries[static_cast<std::size_t>(i)], 0, s * c, c)
                         : rx_features[static_cast<std::size_t>(i)]);
            }
        }
        const std::vector<bool> valid(static_cast<std::size_t>(n), true);
        FusedFeatures out = qaff_->fuse(stage_queries, rx_features, valid);
        fused = std::move(out.fused);
        stage_weights = std::move(out.stage_weights);
        agent_weights = std::move(out.agent_weights);
    } else {
        // mean fusion over the participating agents
        fused = rx_features[0];
        for (int i = 1; i < n; ++i) fused = add(fused, rx_features[static_cast<std::size_t>(i)]);
        fused = scale(fused, 1.0 / static_cast<double>(n));
        stage_weights = Tensor::full({stages}, 1.0 / static_cast<double>(stages));
        agent_weights = Tensor::full({n}, 1.0 / static_cast<double>(n));
    }

    // head queries use the ego's own (uncompressed) mining output
    const Tensor* ego_query = him_ ? &him_results[0].combined_query : nullptr;
    const std::int64_t cells = static_cast<std::int64_t>(grid.height) * grid.width;
    const int top_k = static_cast<int>(std::min<std::int64_t>(cfg_.head.top_k, cells));
    HeadOutput head_out = head_->forward(fused, features[0], ego_query, top_k);

    ForwardResult result;
    result.head = std::move(head_out);
    result.him = std::move(him_results);
    result.stage_weights = std::move(stage_weights);
    result.agent_weights = std::move(agent_weights);
    result.gt = ego_scene.boxes;
    result.grid = grid;
    result.agent_count = n;
    for (const AgentObservation* a : agents) result.agent_ids.push_back(a->agent_id);
    return result;
}

SceneLoss FocalCommModel::scene_loss(const ForwardResult& result) const {
    std::vector<const HimResult*> him_ptrs;
    for (const HimResult& h : result.him) him_ptrs.push_back(&h);
    return total_loss(result.head, him_ptrs, result.gt, result.grid, cfg_.loss);
}

InferenceResult FocalCommModel::infer(const Scene& scene, int compression_ratio) const {
    const ForwardResult fr = forward(scene, HimMode::Infer, compression_ratio);
    InferenceResult out;
    out.detections = head_->decode(fr.head, fr.grid, cfg_.head.nms_iou);
    for (std::int64_t i = 0; i < fr.stage_weights.size(); ++i) out.stage_weights.push_back(fr.stage_weights[i]);
    for (std::int64_t i = 0; i < fr.agent_weights.size(); ++i) out.agent_weights.push_back(fr.agent_weights[i]);
    out.gt = fr.gt;
    return out;
}

std::vector<TrainLogEntry> train_model(FocalCommModel& model, const std::vector<Scene>& scenes) {
    if (scenes.empty()) {
        throw std::invalid_argument("train_model: no scenes");
    }
    const RunConfig& cfg = model.config();
    std::vector<int> ratios = cfg.compression_ratios;
    std::sort(ratios.begin(), ratios.end());
    ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());
    if (ratios.empty()) ratios.push_back(1);

    std::vector<TrainLogEntry> log;
    const double batch = static_cast<double>(scenes.size());
    for (int step = 0; step < cfg.train.steps; ++step) {
        const int ratio = ratios[static_cast<std::size_t>(step) % ratios.size()];
        model.zero_grad();
        LossBreakdown mean;
        for (const Scene& scene : scenes) {
            Tape tape;
            TapeScope scope(tape);
            for (Parameter* p : model.parameters()) tape.watch(*p);
            const ForwardResult fr = model.forward(scene, HimMode::Train, ratio);
            const SceneLoss loss = model.scene_loss(fr);
            tape.backward(scale(loss.total, 1.0 / batch));
            mean.cls += loss.breakdown.cls / batch;
            mean.bbox += loss.breakdown.bbox / batch;
            mean.hm += loss.breakdown.hm / batch;
            mean.total += loss.breakdown.total / batch;
            if (mean.him_per_stage.size() < loss.breakdown.him_per_stage.size()) {
                mean.him_per_stage.resize(loss.breakdown.him_per_stage.size(), 0.0);
            }
            for (std::size_t s = 0; s < loss.breakdown.him_per_stage.size(); ++s) {
                mean.him_per_stage[s] += loss.breakdown.him_per_stage[s] / batch;
            }
        }
        if (!std::isfinite(mean.total)) {
            throw std::runtime_error("train_model: non-finite loss at step " + std::to_string(step));
        }
        model.sgd_step(cfg.train.learning_rate);
        log.push_back(TrainLogEntry{step, std::move(mean)});
    }
    return log;
}

std::string train_log_to_json(const std::vector<TrainLogEntry>& log) {
    nlohmann::ordered_json steps = nlohmann::ordered_json::array();
    for (const TrainLogEntry& e : log) {
        nlohmann::ordered_json j;
        j["step"] = e.step;
        j["cls"] = e.loss.cls;
        j["bbox"] = e.loss.bbox;
        j["hm"] = e.loss.hm;
        j["him"] = e.loss.him_per_stage;
        j["total"] = e.loss.total;
        steps.push_back(j);
    }
    nlohmann::ordered_json root;
    root["steps"] = steps;
    return root.dump(1) + "\n";
}

std::string checkpoint_to_json(FocalCommModel& model) {
    nlohmann::ordered_json root;
    root["format"] = "focalcomm-checkpoint-v1";
    root["config"] = nlohmann::ordered_json::parse(run_config_to_json(model.config()));
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (Parameter* p : model.parameters()) {
        nlohmann::ordered_json j;
        j["name"] = p->name;
        j["shape"] = p->value.shape();
        j["data"] = p->value.values();
        params.push_back(j);
    }
    root["parameters"] = params;
    return root.dump(1) + "\n";
}

void save_checkpoint(FocalCommModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    }
    out << checkpoint_to_json(model);
    if (!out) {
        throw std::runtime_error("save_checkpoint: write failed for " + path.string());
    }
}

void load_checkpoint_text(FocalCommModel& model, const std::string& json_text) {
    const nlohmann::json root = nlohmann::json::parse(json_text);
    std::map<std::string, const nlohmann::json*> stored;
    for (const auto& entry : root.at("parameters")) {
        stored[entry.at("name").get<std::string>()] = &entry;
    }
    std::vector<std::string> problems;
    std::set<std::string> used;
    for (Parameter* p : model.parameters()) {
        const auto it = stored.find(p->name);
        if (it == stored.end()) {
            problems.push_back(p->name + ": missing from checkpoint");
            continue;
        }
        used.insert(p->name);
        const auto shape = it->second->at("shape").get<std::vector<int>>();
        if (shape != p->value.shape()) {
            problems.push_back(p->name + ": expected " + shape_to_string(p->value.shape()) + ", checkpoint has " +
                               shape_to_string(shape));
            continue;
        }
        const auto data = it->second->at("data").get<std::vector<double>>();
        p->value = Tensor(shape, data);
        p->zero_grad();
    }
    for (const auto& [name, entry] : stored) {
        if (!used.count(name)) problems.push_back(name + ": not used by this model layout");
    }
    if (!problems.empty()) {
        std::string msg = "load_checkpoint: incompatible checkpoint:";
        for (const std::string& p : problems) msg += "\n  " + p;
        throw std::runtime_error(msg);
    }
}

void load_checkpoint(FocalCommModel& model, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    load_checkpoint_text(model, buf.str());
}

RunConfig checkpoint_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("checkpoint_config: cannot open " + path.string());
    }
    nlohmann::json root;
    in >> root;
    return run_config_from_json(root.at("config").dump());
}

MetricsReport evaluate_model(const FocalCommModel& model, const std::vector<Scene>& scenes,
                             const std::vector<std::string>& scene_names, int compression_ratio, int jobs) {
    if (!scene_names.empty() && scene_names.size() != scenes.size()) {
        throw std::invalid_argument("evaluate_model: name/scene count mismatch");
    }
    std::vector<InferenceResult> results(scenes.size());
    const int workers = std::max(1, jobs);
    if (workers == 1 || scenes.size() <= 1) {
        for (std::size_t i = 0; i < scenes.size(); ++i) results[i] = model.infer(scenes[i], compression_ratio);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (int t = 0; t < workers; ++t) {
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= scenes.size()) return;
                    results[i] = model.infer(scenes[i], compression_ratio);
                }
            });
        }
        for (std::thread& t : pool) t.join();
    }

    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<GroundTruthBox>> gts;
    for (const InferenceResult& r : results) {
        dets.push_back(r.detections);
        gts.push_back(r.gt);
    }
    MetricsReport report = evaluate_scenes(dets, gts, model.config().eval);
    for (std::size_t i = 0; i < results.size(); ++i) {
        SceneTrace trace;
        trace.scene = scene_names.empty() ? "scene_" + std::to_string(i) : scene_names[i];
        trace.stage_weights = results[i].stage_weights;
        trace.agent_weights = results[i].agent_weights;
        trace.detections = results[i].detections;
        report.per_scene.push_back(std::move(trace));
    }
    return report;
}

std::vector<SweepRow> sweep_model(const FocalCommModel& model, const std::vector<Scene>& scenes,
                                  const std::vector<std::string>& scene_names, std::vector<int> ratios,
                                  int jobs) {
    std::sort(ratios.begin(), ratios.end());
    ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());
    std::vector<SweepRow> rows;
    for (int ratio : ratios) {
        const MetricsReport report = evaluate_model(model, scenes, scene_names, ratio, jobs);
        SweepRow row;
        row.ratio = ratio;
        row.map_per_threshold = report.map_per_threshold;
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace focalcomm
