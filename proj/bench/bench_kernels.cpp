// Serial reference vs OpenMP kernels over word counts that straddle kParallelWords.

#include <benchmark/benchmark.h>

#include <vector>

#include "vise/kernels.hpp"
#include "vise/rng.hpp"

namespace k = vise::kernels;

namespace {

std::vector<std::uint64_t> words(std::size_t n, std::uint64_t seed) {
    vise::Rng rng{seed};
    std::vector<std::uint64_t> v(n);
    for (auto& w : v) w = rng.next();
    return v;
}

std::vector<std::uint8_t> bytes(int side, std::uint64_t seed) {
    vise::Rng rng{seed};
    std::vector<std::uint8_t> v(static_cast<std::size_t>(side) * side);
    for (auto& b : v) b = rng.uniform() < 0.3;
    return v;
}

template <auto Fn>
void confusion(benchmark::State& st) {
    const auto a = words(static_cast<std::size_t>(st.range(0)), 1);
    const auto b = words(static_cast<std::size_t>(st.range(0)), 2);
    for (auto _ : st) benchmark::DoNotOptimize(Fn(a, b));
    st.SetBytesProcessed(static_cast<std::int64_t>(st.iterations()) * st.range(0) * 16);
}

template <auto Fn>
void or_into(benchmark::State& st) {
    auto a = words(static_cast<std::size_t>(st.range(0)), 1);
    const auto b = words(static_cast<std::size_t>(st.range(0)), 2);
    for (auto _ : st) {
        Fn(a, b);
        benchmark::ClobberMemory();
    }
    st.SetBytesProcessed(static_cast<std::int64_t>(st.iterations()) * st.range(0) * 16);
}

template <auto Fn>
void morph(benchmark::State& st) {
    const int side = static_cast<int>(st.range(0));
    const auto in = bytes(side, 3);
    std::vector<std::uint8_t> out(in.size());
    for (auto _ : st) {
        Fn(in, out, side, side, 2, true);
        benchmark::ClobberMemory();
    }
    st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations()) * side * side);
}

}  // namespace

// 512x512 = 4096 words; 4096x4096 = 262144 words.
BENCHMARK(confusion<k::serial::confusion>)->Name("confusion/serial")->RangeMultiplier(8)->Range(4096, 1 << 18);
BENCHMARK(confusion<k::parallel::confusion>)->Name("confusion/parallel")->RangeMultiplier(8)->Range(4096, 1 << 18);
BENCHMARK(or_into<k::serial::or_into>)->Name("or_into/serial")->RangeMultiplier(8)->Range(4096, 1 << 18);
BENCHMARK(or_into<k::parallel::or_into>)->Name("or_into/parallel")->RangeMultiplier(8)->Range(4096, 1 << 18);
BENCHMARK(morph<k::serial::morph>)->Name("morph/serial")->Arg(512)->Arg(2048);
BENCHMARK(morph<k::parallel::morph>)->Name("morph/parallel")->Arg(512)->Arg(2048);

BENCHMARK_MAIN();
