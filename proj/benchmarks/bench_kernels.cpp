#include "medmamba/model.hpp"
#include "medmamba/ops.hpp"
#include "medmamba/rng.hpp"
#include "medmamba/ssm.hpp"

#include <benchmark/benchmark.h>

using namespace medmamba;

namespace {

Tensor<float> random_f(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor<float>::from(std::move(shape), std::move(v));
}

void BM_SelectiveScan(benchmark::State& state) {
    const auto len = state.range(0);
    const std::int64_t d = 64, n = 16;
    Rng rng(1);
    const auto x = random_f({1, len, d}, rng);
    const auto delta = random_f({1, len, d}, rng, 0.001, 0.1);
    const auto a = random_f({d, n}, rng, -2, -0.1);
    const auto b = random_f({1, len, n}, rng);
    const auto c = random_f({1, len, n}, rng);
    const auto skip = random_f({d}, rng);
    NoGradGuard guard;
    for (auto _ : state) {
        benchmark::DoNotOptimize(selective_scan(x, delta, a, b, c, skip));
    }
    state.SetComplexityN(len);
}
BENCHMARK(BM_SelectiveScan)->RangeMultiplier(2)->Range(1024, 8192)->Complexity(benchmark::oN)->Unit(benchmark::kMillisecond);

void BM_SelectiveScanBackward(benchmark::State& state) {
    const auto len = state.range(0);
    const std::int64_t d = 32, n = 16;
    Rng rng(2);
    auto x = random_f({1, len, d}, rng);
    x.set_requires_grad(true);
    const auto delta = random_f({1, len, d}, rng, 0.001, 0.1);
    const auto a = random_f({d, n}, rng, -2, -0.1);
    const auto b = random_f({1, len, n}, rng);
    const auto c = random_f({1, len, n}, rng);
    const auto skip = random_f({d}, rng);
    for (auto _ : state) {
        x.zero_grad();
        sum(selective_scan(x, delta, a, b, c, skip)).backward();
    }
}
BENCHMARK(BM_SelectiveScanBackward)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_Conv2d(benchmark::State& state) {
    const auto algo = static_cast<ConvAlgorithm>(state.range(0));
    const auto ch = state.range(1);
    Rng rng(3);
    const auto x = random_f({8, ch, 28, 28}, rng);
    const auto w = random_f({ch, ch, 3, 3}, rng);
    Conv2dOptions opt;
    opt.padding = {1, 1};
    opt.algorithm = algo;
    NoGradGuard guard;
    for (auto _ : state) {
        benchmark::DoNotOptimize(conv2d(x, w, Tensor<float>{}, opt));
    }
}
BENCHMARK(BM_Conv2d)
    ->ArgsProduct({{static_cast<long>(ConvAlgorithm::im2col), static_cast<long>(ConvAlgorithm::direct)}, {12, 48}})
    ->Unit(benchmark::kMillisecond);

void BM_TinyForward(benchmark::State& state) {
    MedMamba<float> model(ModelConfig::tiny(), 0);
    Rng rng(4);
    const auto x = random_f({8, 3, 16, 16}, rng);
    NoGradGuard guard;
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward(x, NormMode::train));
    }
}
BENCHMARK(BM_TinyForward)->Unit(benchmark::kMillisecond);

void BM_ReducedTrainStep(benchmark::State& state) {
    auto cfg = ModelConfig{}.with_base_dim(24);
    cfg.depths = {1, 1, 2, 1};
    cfg.input_size = 64;
    MedMamba<float> model(cfg, 0);
    Rng rng(5);
    const auto x = random_f({16, 3, 64, 64}, rng);
    for (auto _ : state) {
        model.zero_grad();
        sum(model.forward(x, NormMode::train)).backward();
    }
}
BENCHMARK(BM_ReducedTrainStep)->Unit(benchmark::kMillisecond)->Iterations(3);

} // namespace
BENCHMARK_MAIN();
