#include <benchmark/benchmark.h>

#include "focalcomm/model.hpp"

using namespace focalcomm;

namespace {

RunConfig bench_config() {
    RunConfig cfg;
    cfg.scene.agent_count = 3;
    cfg.scene.placement_range = 12.0;
    cfg.scene.cars = 3;
    cfg.scene.pedestrians = 2;
    cfg.scene.trucks = 1;
    cfg.voxel.range_x = {-12.8, 12.8};
    cfg.voxel.range_y = {-12.8, 12.8};
    cfg.voxel.range_z = {-2.0, 4.0};
    cfg.voxel.downsample = 4;
    cfg.voxel.channels = 8;
    cfg.voxel.hidden_channels = 6;
    cfg.him.n_stages = 3;
    cfg.qaff.heads = 2;
    cfg.qaff.model_dim = 16;
    cfg.head.heads = 2;
    cfg.head.model_dim = 16;
    cfg.head.top_k = 16;
    cfg.eval.range_xy = 12.8;
    return cfg;
}

}  // namespace

static void BM_VoxelizeAndEncode(benchmark::State& state) {
    const RunConfig cfg = bench_config();
    FocalCommModel model(cfg);
    model.init();
    const Scene scene = generate_scene(1, cfg.scene);
    BevEncoder encoder(cfg.voxel);
    std::mt19937_64 rng(2);
    encoder.init(rng);
    for (auto _ : state) {
        Tensor f = encoder.encode(voxelize(scene.agents[0].points, cfg.voxel), cfg.voxel);
        benchmark::DoNotOptimize(f.data());
    }
}
BENCHMARK(BM_VoxelizeAndEncode);

static void BM_InferenceForward(benchmark::State& state) {
    const RunConfig cfg = bench_config();
    FocalCommModel model(cfg);
    model.init();
    const Scene scene = generate_scene(1, cfg.scene);
    for (auto _ : state) {
        InferenceResult r = model.infer(scene);
        benchmark::DoNotOptimize(r.detections.data());
    }
}
BENCHMARK(BM_InferenceForward);

static void BM_TrainStep(benchmark::State& state) {
    RunConfig cfg = bench_config();
    cfg.train.steps = 1;
    FocalCommModel model(cfg);
    model.init();
    const Scene scene = generate_scene(1, cfg.scene);
    for (auto _ : state) {
        model.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        for (Parameter* p : model.parameters()) tape.watch(*p);
        const ForwardResult fr = model.forward(scene, HimMode::Train);
        const SceneLoss loss = model.scene_loss(fr);
        tape.backward(loss.total);
        model.sgd_step(cfg.train.learning_rate);
        benchmark::DoNotOptimize(loss.breakdown.total);
    }
}
BENCHMARK(BM_TrainStep);

BENCHMARK_MAIN();
