// Serial reference kernels against the parallel ones, at the layer sizes of
// the desk-scale model (128x64 input, batch 8) and of the full-size stem.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "carn/kernels.hpp"

using namespace carn::kernels;

namespace {

std::vector<float> noise(std::size_t n) {
    std::mt19937_64 rng(n);
    std::normal_distribution<float> g(0.f, 1.f);
    std::vector<float> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

// batch, c_in, h, w, c_out, k, stride
ConvGeometry geometry(const benchmark::State& st) {
    ConvGeometry g;
    g.batch = static_cast<std::size_t>(st.range(0));
    g.in_channels = static_cast<std::size_t>(st.range(1));
    g.in_h = static_cast<std::size_t>(st.range(2));
    g.in_w = static_cast<std::size_t>(st.range(3));
    g.out_channels = static_cast<std::size_t>(st.range(4));
    g.kernel_h = g.kernel_w = static_cast<std::size_t>(st.range(5));
    g.stride = static_cast<std::size_t>(st.range(6));
    g.pad_h = g.pad_w = (g.kernel_h - 1) / 2;
    return g;
}

struct Buffers {
    std::vector<float> x, k, b, y;
    explicit Buffers(const ConvGeometry& g)
        : x(noise(g.batch * g.in_channels * g.in_h * g.in_w)),
          k(noise(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w)),
          b(noise(g.out_channels)),
          y(noise(g.batch * g.out_channels * g.out_h() * g.out_w())) {}
};

template <bool Parallel>
void conv_forward(benchmark::State& st) {
    const auto g = geometry(st);
    Buffers buf(g);
    std::vector<float> out(buf.y.size());
    for (auto _ : st) {
        if constexpr (Parallel) conv2d_forward<float>(g, buf.x, buf.k, buf.b, out);
        else serial::conv2d_forward<float>(g, buf.x, buf.k, buf.b, out);
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Parallel>
void conv_backward(benchmark::State& st) {
    const auto g = geometry(st);
    Buffers buf(g);
    std::vector<float> gx(buf.x.size()), gk(buf.k.size()), gb(buf.b.size());
    for (auto _ : st) {
        if constexpr (Parallel) {
            conv2d_backward_input<float>(g, buf.y, buf.k, gx);
            conv2d_backward_params<float>(g, buf.x, buf.y, gk, gb);
        } else {
            serial::conv2d_backward_input<float>(g, buf.y, buf.k, gx);
            serial::conv2d_backward_params<float>(g, buf.x, buf.y, gk, gb);
        }
        benchmark::DoNotOptimize(gk.data());
    }
}

template <bool Parallel>
void maxpool(benchmark::State& st) {
    const auto planes = static_cast<std::size_t>(st.range(0));
    const auto h = static_cast<std::size_t>(st.range(1)), w = static_cast<std::size_t>(st.range(2));
    const auto x = noise(planes * h * w);
    std::vector<float> y(planes * h * w / 4);
    std::vector<std::size_t> arg(y.size());
    for (auto _ : st) {
        if constexpr (Parallel) maxpool2_forward<float>(planes, h, w, x, y, arg);
        else serial::maxpool2_forward<float>(planes, h, w, x, y, arg);
        benchmark::DoNotOptimize(y.data());
    }
}

void conv_shapes(benchmark::internal::Benchmark* b) {
    b->ArgNames({"B", "C", "H", "W", "F", "k", "s"});
    b->Args({8, 1, 128, 64, 8, 7, 2});   // desk stem
    b->Args({8, 8, 64, 32, 8, 3, 1});    // first unit, linear conv
    b->Args({8, 16, 32, 16, 8, 3, 1});   // second unit
    b->Args({8, 40, 8, 4, 16, 3, 1});    // fourth unit
    b->Args({8, 120, 2, 1, 64, 1, 1});   // 1x1 mix
    b->Args({2, 1, 512, 256, 32, 7, 2}); // full-size stem
    b->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv_forward/serial")->Apply(conv_shapes);
BENCHMARK(conv_forward<true>)->Name("conv_forward/parallel")->Apply(conv_shapes);
BENCHMARK(conv_backward<false>)->Name("conv_backward/serial")->Apply(conv_shapes);
BENCHMARK(conv_backward<true>)->Name("conv_backward/parallel")->Apply(conv_shapes);
BENCHMARK(maxpool<false>)->Name("maxpool/serial")->Args({64, 64, 32})->Args({256, 256, 128});
BENCHMARK(maxpool<true>)->Name("maxpool/parallel")->Args({64, 64, 32})->Args({256, 256, 128});

BENCHMARK_MAIN();
