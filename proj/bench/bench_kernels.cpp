// Reference vs OpenMP kernels on shapes from a 64x64, width-8 network.
// The thread count is the benchmark's range(0) argument.

#include <benchmark/benchmark.h>

#include <vector>

#include "sgseg/kernels.hpp"
#include "sgseg/rng.hpp"

using namespace sgseg;
using namespace sgseg::kernels;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
    return v;
}

ConvGeometry conv_shape() {
    ConvGeometry g;
    g.batch = 4;
    g.in_channels = 16;
    g.out_channels = 16;
    g.height = 32;
    g.width = 32;
    g.kernel = 3;
    g.pad = 1;
    return g;
}

struct ConvData {
    ConvGeometry g = conv_shape();
    std::vector<float> x, w, b, y, dy, dx, dw, db;
    ConvData() {
        const auto nx = static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width;
        const auto ny = static_cast<std::size_t>(g.batch) * g.out_channels * g.out_height() * g.out_width();
        x = noise(nx, 1);
        w = noise(static_cast<std::size_t>(g.out_channels) * g.in_channels * 9, 2);
        b = noise(static_cast<std::size_t>(g.out_channels), 3);
        dy = noise(ny, 4);
        y.resize(ny);
        dx.resize(nx);
        dw.resize(w.size());
        db.resize(b.size());
    }
};

void threads_from(benchmark::State& state) { set_num_threads(static_cast<int>(state.range(0))); }

void BM_conv_forward_reference(benchmark::State& state) {
    ConvData d;
    for (auto _ : state) {
        reference::conv2d_forward(d.g, d.x.data(), d.w.data(), d.b.data(), d.y.data());
        benchmark::DoNotOptimize(d.y.data());
    }
}

void BM_conv_forward_parallel(benchmark::State& state) {
    threads_from(state);
    ConvData d;
    for (auto _ : state) {
        parallel::conv2d_forward(d.g, d.x.data(), d.w.data(), d.b.data(), d.y.data());
        benchmark::DoNotOptimize(d.y.data());
    }
}

void BM_conv_backward_reference(benchmark::State& state) {
    ConvData d;
    for (auto _ : state) {
        std::fill(d.dx.begin(), d.dx.end(), 0.0f);
        std::fill(d.dw.begin(), d.dw.end(), 0.0f);
        std::fill(d.db.begin(), d.db.end(), 0.0f);
        reference::conv2d_backward_input(d.g, d.dy.data(), d.w.data(), d.dx.data());
        reference::conv2d_backward_weight(d.g, d.x.data(), d.dy.data(), d.dw.data(), d.db.data());
        benchmark::DoNotOptimize(d.dw.data());
    }
}

void BM_conv_backward_parallel(benchmark::State& state) {
    threads_from(state);
    ConvData d;
    for (auto _ : state) {
        std::fill(d.dx.begin(), d.dx.end(), 0.0f);
        std::fill(d.dw.begin(), d.dw.end(), 0.0f);
        std::fill(d.db.begin(), d.db.end(), 0.0f);
        parallel::conv2d_backward_input(d.g, d.dy.data(), d.w.data(), d.dx.data());
        parallel::conv2d_backward_weight(d.g, d.x.data(), d.dy.data(), d.dw.data(), d.db.data());
        benchmark::DoNotOptimize(d.dw.data());
    }
}

void BM_gemm_reference(benchmark::State& state) {
    const int n = 128;
    auto a = noise(n * n, 5), b = noise(n * n, 6);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        reference::gemm(n, n, n, a.data(), b.data(), c.data());
        benchmark::DoNotOptimize(c.data());
    }
}

void BM_gemm_parallel(benchmark::State& state) {
    threads_from(state);
    const int n = 128;
    auto a = noise(n * n, 5), b = noise(n * n, 6);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        parallel::gemm(n, n, n, a.data(), b.data(), c.data());
        benchmark::DoNotOptimize(c.data());
    }
}

PlaneGeometry plane_shape() { return {64, 64, 64}; }

void BM_pool_upsample_reference(benchmark::State& state) {
    const auto g = plane_shape();
    const auto n = static_cast<std::size_t>(g.planes) * g.height * g.width;
    auto x = noise(n, 7);
    std::vector<float> y(n / 4), u(n * 4);
    std::vector<std::int64_t> arg(n / 4);
    for (auto _ : state) {
        reference::max_pool2_forward(g, x.data(), y.data(), arg.data());
        reference::upsample_bilinear2_forward(g, x.data(), u.data());
        benchmark::DoNotOptimize(u.data());
    }
}

void BM_pool_upsample_parallel(benchmark::State& state) {
    threads_from(state);
    const auto g = plane_shape();
    const auto n = static_cast<std::size_t>(g.planes) * g.height * g.width;
    auto x = noise(n, 7);
    std::vector<float> y(n / 4), u(n * 4);
    std::vector<std::int64_t> arg(n / 4);
    for (auto _ : state) {
        parallel::max_pool2_forward(g, x.data(), y.data(), arg.data());
        parallel::upsample_bilinear2_forward(g, x.data(), u.data());
        benchmark::DoNotOptimize(u.data());
    }
}

}  // namespace

BENCHMARK(BM_conv_forward_reference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_forward_parallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_backward_reference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_backward_parallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm_reference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm_parallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_pool_upsample_reference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_pool_upsample_parallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
