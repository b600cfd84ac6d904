#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "focalcomm/model.hpp"

namespace fs = std::filesystem;
using namespace focalcomm;

namespace {

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    out << content;
    if (!out) {
        throw std::runtime_error("write failed for " + path.string());
    }
}

std::vector<fs::path> scene_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("scene directory " + dir.string() + " does not exist");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw std::runtime_error("no scene files in " + dir.string());
    }
    return files;
}

struct LoadedScenes {
    std::vector<Scene> scenes;
    std::vector<std::string> names;
};

LoadedScenes load_scenes(const fs::path& dir) {
    LoadedScenes out;
    for (const fs::path& file : scene_files(dir)) {
        out.scenes.push_back(load_scene(file));
        out.names.push_back(file.filename().string());
    }
    return out;
}

void apply_ablation(RunConfig& cfg, const std::string& ablate, bool single_agent) {
    if (ablate == "him") {
        cfg.ablation.him_enabled = false;
    } else if (ablate == "qaff") {
        cfg.ablation.qaff_enabled = false;
    } else if (ablate == "both") {
        cfg.ablation.him_enabled = false;
        cfg.ablation.qaff_enabled = false;
    } else if (ablate != "none") {
        throw std::runtime_error("unknown ablation '" + ablate + "' (expected him|qaff|none|both)");
    }
    if (single_agent) {
        cfg.ablation.collaboration_enabled = false;
    }
}

int cmd_gen(std::uint64_t seed, int count, const fs::path& out_dir, const std::string& config_path) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    fs::create_directories(out_dir);
    if (!fs::is_directory(out_dir)) {
        throw std::runtime_error("cannot create output directory " + out_dir.string());
    }
    for (int i = 0; i < count; ++i) {
        const Scene scene = generate_scene(seed + static_cast<std::uint64_t>(i), cfg.scene);
        const fs::path file = out_dir / ("scene_" + std::to_string(seed) + "_" + std::to_string(i) + ".json");
        save_scene(scene, file);
    }
    std::cout << "wrote " << count << " scene(s) to " << out_dir.string() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const fs::path& scenes_dir, int steps_override,
              const fs::path& out_ckpt, std::string log_path) {
    RunConfig cfg = load_run_config(config_path);
    if (steps_override >= 0) cfg.train.steps = steps_override;
    cfg.validate();

    const LoadedScenes data = load_scenes(scenes_dir);
    FocalCommModel model(cfg);
    model.init();
    const std::vector<TrainLogEntry> log = train_model(model, data.scenes);
    save_checkpoint(model, out_ckpt);
    if (log_path.empty()) log_path = out_ckpt.string() + ".log.json";
    write_file(log_path, train_log_to_json(log));
    if (!log.empty()) {
        std::cout << "step 0 total " << log.front().loss.total << ", step " << log.back().step << " total "
                  << log.back().loss.total << "\n";
    }
    std::cout << "checkpoint " << out_ckpt.string() << ", log " << log_path << "\n";
    return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& scenes_dir, const std::string& ablate, bool single_agent,
             int ratio, int jobs, const fs::path& out_report) {
    RunConfig cfg = checkpoint_config(ckpt);
    apply_ablation(cfg, ablate, single_agent);
    FocalCommModel model(cfg);
    load_checkpoint(model, ckpt);

    const LoadedScenes data = load_scenes(scenes_dir);
    const MetricsReport report = evaluate_model(model, data.scenes, data.names, ratio, jobs);
    const std::string json = metrics_report_to_json(report, run_config_to_json(cfg));
    write_file(out_report, json);
    for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
        std::cout << "mAP@" << report.thresholds[t] << " = " << report.map_per_threshold[t] << "\n";
    }
    std::cout << "report " << out_report.string() << "\n";
    return 0;
}

int cmd_sweep(const fs::path& ckpt, const fs::path& scenes_dir, const std::vector<int>& ratios, int jobs,
              const fs::path& out_csv, std::string plot_path) {
    RunConfig cfg = checkpoint_config(ckpt);
    FocalCommModel model(cfg);
    load_checkpoint(model, ckpt);

    const LoadedScenes data = load_scenes(scenes_dir);
    const std::vector<SweepRow> rows = sweep_model(model, data.scenes, data.names, ratios, jobs);
    write_file(out_csv, sweep_table_to_csv(rows, cfg.eval.iou_thresholds));

    // plot-data file alongside the CSV
    if (plot_path.empty()) plot_path = out_csv.string() + ".plot.json";
    std::string plot = "{\n\"rows\": [\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        plot += "{\"ratio\": " + std::to_string(rows[i].ratio);
        for (std::size_t t = 0; t < cfg.eval.iou_thresholds.size(); ++t) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), ", \"map%02d\": %.9g",
                          static_cast<int>(std::lround(cfg.eval.iou_thresholds[t] * 10.0)),
                          rows[i].map_per_threshold[t]);
            plot += buf;
        }
        plot += "}";
        if (i + 1 < rows.size()) plot += ",";
        plot += "\n";
    }
    plot += "]\n}\n";
    write_file(plot_path, plot);
    std::cout << "sweep " << out_csv.string() << ", plot data " << plot_path << "\n";
    return 0;
}

int cmd_dump(const fs::path& ckpt, const fs::path& scene_file, const fs::path& out_dir) {
    const RunConfig cfg = checkpoint_config(ckpt);
    if (!cfg.ablation.him_enabled) {
        throw std::runtime_error("checkpoint was trained with mining disabled; no stage heatmaps to dump");
    }
    FocalCommModel model(cfg);
    load_checkpoint(model, ckpt);
    const Scene scene = load_scene(scene_file);
    const ForwardResult fr = model.forward(scene, HimMode::Infer);
    fs::create_directories(out_dir);
    int files = 0;
    for (std::size_t a = 0; a < fr.him.size(); ++a) {
        const int agent_id = fr.agent_ids[a];
        for (std::size_t s = 0; s < fr.him[a].stages.size(); ++s) {
            const Tensor& logits = fr.him[a].stages[s].heatmap_logits;
            for (int k = 0; k < logits.extent(0); ++k) {
                const fs::path file = out_dir / ("agent" + std::to_string(agent_id) + "_stage" +
                                                 std::to_string(s) + "_class" + std::to_string(k) + ".pgm");
                write_file(file, heatmap_to_pgm(logits, k));
                ++files;
            }
        }
    }
    std::cout << "wrote " << files << " heatmap(s) to " << out_dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FocalComm collaborative perception pipeline"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "Generate synthetic scenes");
    std::uint64_t gen_seed = 7;
    int gen_count = 1;
    std::string gen_out = "scenes";
    std::string gen_config;
    gen->add_option("--seed", gen_seed, "Base seed; scene i uses seed + i");
    gen->add_option("--count", gen_count, "Number of scenes")->check(CLI::NonNegativeNumber);
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--config", gen_config, "Run config providing scene settings");

    // train
    auto* train = app.add_subcommand("train", "Train on a scene directory");
    std::string train_config;
    std::string train_scenes;
    std::string train_out = "model.ckpt.json";
    std::string train_log;
    int train_steps = -1;
    train->add_option("--config", train_config, "Run config file")->required();
    train->add_option("--scenes", train_scenes, "Scene directory")->required();
    train->add_option("--steps", train_steps, "Override config step count");
    train->add_option("--out", train_out, "Checkpoint output path");
    train->add_option("--log", train_log, "Training log path (default <out>.log.json)");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string eval_ckpt;
    std::string eval_scenes;
    std::string eval_ablate = "none";
    std::string eval_out = "report.json";
    bool eval_single_agent = false;
    int eval_ratio = 1;
    int eval_jobs = 1;
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
    eval->add_option("--scenes", eval_scenes, "Scene directory")->required();
    eval->add_option("--ablate", eval_ablate, "him|qaff|none|both");
    eval->add_flag("--single-agent", eval_single_agent, "Use only the ego observation");
    eval->add_option("--ratio", eval_ratio, "Compression ratio for exchanged features");
    eval->add_option("--jobs", eval_jobs, "Scene-parallel workers")->check(CLI::PositiveNumber);
    eval->add_option("--out", eval_out, "Report output path");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Compression ratio sweep");
    std::string sweep_ckpt;
    std::string sweep_scenes;
    std::vector<int> sweep_ratios = {1, 2, 4, 8, 16, 32, 64};
    std::string sweep_out = "sweep.csv";
    std::string sweep_plot;
    int sweep_jobs = 1;
    sweep->add_option("--ckpt", sweep_ckpt, "Checkpoint path")->required();
    sweep->add_option("--scenes", sweep_scenes, "Scene directory")->required();
    sweep->add_option("--ratios", sweep_ratios, "Ratios to evaluate")->delimiter(',');
    sweep->add_option("--out", sweep_out, "CSV output path");
    sweep->add_option("--plot", sweep_plot, "Plot-data JSON path (default <out>.plot.json)");
    sweep->add_option("--jobs", sweep_jobs, "Scene-parallel workers")->check(CLI::PositiveNumber);

    // dump
    auto* dump = app.add_subcommand("dump", "Dump per-stage heatmaps as PGM");
    std::string dump_ckpt;
    std::string dump_scene;
    std::string dump_out = "heatmaps";
    dump->add_option("--ckpt", dump_ckpt, "Checkpoint path")->required();
    dump->add_option("--scene", dump_scene, "Scene file")->required();
    dump->add_option("--out", dump_out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen(gen_seed, gen_count, gen_out, gen_config);
        if (train->parsed()) return cmd_train(train_config, train_scenes, train_steps, train_out, train_log);
        if (eval->parsed())
            return cmd_eval(eval_ckpt, eval_scenes, eval_ablate, eval_single_agent, eval_ratio, eval_jobs,
                            eval_out);
        if (sweep->parsed()) return cmd_sweep(sweep_ckpt, sweep_scenes, sweep_ratios, sweep_jobs, sweep_out, sweep_plot);
        if (dump->parsed()) return cmd_dump(dump_ckpt, dump_scene, dump_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
