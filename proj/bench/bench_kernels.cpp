#include <benchmark/benchmark.h>

#include "etstpm/kernels.hpp"
#include "etstpm/rng.hpp"

using namespace etstpm;

namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed) {
    Tensor<float> t(std::move(shape));
    Rng rng(seed);
    for (auto& v : t.storage()) v = static_cast<float>(rng.normal());
    return t;
}

// Stage-2 shaped 3x3 convolution at desk scale: (8, 16, 16, 16) -> 32 channels.
struct ConvCase {
    Tensor<float> x = random_tensor({8, 16, 16, 16}, 1);
    Tensor<float> w = random_tensor({32, 16, 3, 3}, 2);
    ConvGeometry g{2, 1};
};

void BM_ConvForwardReference(benchmark::State& state) {
    ConvCase c;
    for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d_forward(c.x, c.w, c.g));
}

void BM_ConvForwardParallel(benchmark::State& state) {
    ConvCase c;
    for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_forward(c.x, c.w, c.g));
}

void BM_ConvBackwardReference(benchmark::State& state) {
    ConvCase c;
    const Tensor<float> dy = random_tensor({8, 32, 8, 8}, 3);
    for (auto _ : state) {
        Tensor<float> dw(c.w.shape()), dx;
        reference::conv2d_backward(c.x, c.w, dy, c.g, dw, &dx);
        benchmark::DoNotOptimize(dx);
    }
}

void BM_ConvBackwardParallel(benchmark::State& state) {
    ConvCase c;
    const Tensor<float> dy = random_tensor({8, 32, 8, 8}, 3);
    for (auto _ : state) {
        Tensor<float> dw(c.w.shape()), dx;
        kernels::conv2d_backward(c.x, c.w, dy, c.g, dw, &dx);
        benchmark::DoNotOptimize(dx);
    }
}

void BM_BatchNormReference(benchmark::State& state) {
    const auto x = random_tensor({8, 32, 16, 16}, 4);
    Tensor<float> gamma({32}), beta({32});
    gamma.fill(1.0f);
    for (auto _ : state) benchmark::DoNotOptimize(reference::batchnorm_forward_batch(x, gamma, beta, 1e-5));
}

void BM_BatchNormParallel(benchmark::State& state) {
    const auto x = random_tensor({8, 32, 16, 16}, 4);
    Tensor<float> gamma({32}), beta({32});
    gamma.fill(1.0f);
    for (auto _ : state)
        benchmark::DoNotOptimize(
            kernels::batchnorm_forward_batch<float>(x, gamma, beta, nullptr, nullptr, 0.1, 1e-5, nullptr));
}

} // namespace

BENCHMARK(BM_ConvForwardReference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ConvForwardParallel)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ConvBackwardReference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ConvBackwardParallel)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BatchNormReference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BatchNormParallel)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
