#include <benchmark/benchmark.h>

#include <random>

#include "focalcomm/geometry.hpp"
#include "focalcomm/hungarian.hpp"
#include "focalcomm/ops.hpp"

using namespace focalcomm;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Tensor a = random_tensor({n, n}, 1);
    const Tensor b = random_tensor({n, n}, 2);
    for (auto _ : state) {
        Tensor c = matmul(a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetComplexityN(n);
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 128)->Complexity();

static void BM_Conv2dSamePadded(benchmark::State& state) {
    const int hw = static_cast<int>(state.range(0));
    const Tensor x = random_tensor({8, hw, hw}, 3);
    const Tensor w = random_tensor({8, 8, 3, 3}, 4);
    const Tensor b = random_tensor({8}, 5);
    for (auto _ : state) {
        Tensor y = conv2d(x, w, b);
        benchmark::DoNotOptimize(y.data());
    }
    state.SetComplexityN(hw);
}
BENCHMARK(BM_Conv2dSamePadded)->RangeMultiplier(2)->Range(16, 128)->Complexity();

static void BM_SoftmaxLastAxis(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Tensor x = random_tensor({n, 64}, 6);
    for (auto _ : state) {
        Tensor y = softmax(x, -1);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BM_SoftmaxLastAxis)->Range(256, 4096);

static void BM_MaxPoolPeaks(benchmark::State& state) {
    const int hw = static_cast<int>(state.range(0));
    const Tensor x = random_tensor({3, hw, hw}, 7);
    for (auto _ : state) {
        Tensor y = max_pool_peaks(x, 3);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BM_MaxPoolPeaks)->RangeMultiplier(2)->Range(32, 128);

static void BM_RotatedIou(benchmark::State& state) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> pos(-3.0, 3.0), dim(0.5, 5.0), ang(-3.1, 3.1);
    std::vector<std::pair<OrientedBox, OrientedBox>> pairs;
    for (int i = 0; i < 256; ++i) {
        pairs.push_back({OrientedBox{pos(rng), pos(rng), dim(rng), dim(rng), ang(rng)},
                         OrientedBox{pos(rng), pos(rng), dim(rng), dim(rng), ang(rng)}});
    }
    std::size_t i = 0;
    for (auto _ : state) {
        const auto& [a, b] = pairs[i++ & 255];
        benchmark::DoNotOptimize(rotated_bev_iou(a, b));
    }
}
BENCHMARK(BM_RotatedIou);

static void BM_Hungarian(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(n),
                                          std::vector<double>(static_cast<std::size_t>(n)));
    for (auto& row : cost)
        for (double& v : row) v = u(rng);
    for (auto _ : state) {
        auto assign = hungarian_assign(cost);
        benchmark::DoNotOptimize(assign.data());
    }
    state.SetComplexityN(n);
}
BENCHMARK(BM_Hungarian)->RangeMultiplier(2)->Range(4, 64)->Complexity();

static void BM_BackwardQuadraticChain(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Parameter p("p", random_tensor({n, n}, 10));
    for (auto _ : state) {
        p.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        tape.watch(p);
        Tensor loss = mean_all(mul(sigmoid(p.value), p.value));
        tape.backward(loss);
        benchmark::DoNotOptimize(p.grad.data());
    }
}
BENCHMARK(BM_BackwardQuadraticChain)->Range(32, 128);

BENCHMARK_MAIN();
