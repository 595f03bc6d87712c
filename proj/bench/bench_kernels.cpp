// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels against their serial references. Sizes follow the latent
// grids of a 512x512 (64x64) and 256x256 (32x32) image.

#include <random>

#include <benchmark/benchmark.h>
#include <omp.h>

#include "relayout/kernels.hpp"

using namespace relayout;
namespace k = relayout::kernels;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> d;
    Matrix m(rows, cols);
    for (auto& v : m.data)
        v = d(gen);
    return m;
}

/// Every target restricted to a random half of the sources.
k::CandidateSets half_sets(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    k::CandidateSets c;
    c.sets.resize(4);
    for (std::uint32_t i = 0; i < n; ++i)
        for (auto& s : c.sets)
            if (gen() & 1)
                s.push_back(i);
    c.set_of_target.resize(n);
    for (auto& s : c.set_of_target)
        s = static_cast<int>(gen() % 4);
    return c;
}

void set_threads(benchmark::State& state) {
    omp_set_num_threads(static_cast<int>(state.range(1)));
    state.counters["threads"] = static_cast<double>(state.range(1));
}

void BM_CosineOmp(benchmark::State& state) {
    set_threads(state);
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, 64, 1), b = random_matrix(n, 64, 2);
    for (auto _ : state)
        benchmark::DoNotOptimize(k::cosine_similarity(a, b));
}

void BM_CosineReference(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, 64, 1), b = random_matrix(n, 64, 2);
    for (auto _ : state)
        benchmark::DoNotOptimize(k::reference::cosine_similarity(a, b));
}

void BM_StreamingArgmaxOmp(benchmark::State& state) {
    set_threads(state);
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, 64, 3), b = random_matrix(n, 64, 4);
    const auto sets = half_sets(n, 5);
    for (auto _ : state)
        benchmark::DoNotOptimize(k::streaming_restricted_argmax(a, b, sets));
}

void BM_RestrictedArgmaxReference(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, 64, 3), b = random_matrix(n, 64, 4);
    const auto sets = half_sets(n, 5);
    for (auto _ : state)
        benchmark::DoNotOptimize(
            k::reference::restricted_column_argmax(k::reference::cosine_similarity(a, b), sets));
}

void BM_MatmulOmp(benchmark::State& state) {
    set_threads(state);
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, 320, 6), b = random_matrix(320, 320, 7);
    for (auto _ : state)
        benchmark::DoNotOptimize(k::matmul(a, b));
}

void BM_MatmulReference(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, 320, 6), b = random_matrix(320, 320, 7);
    for (auto _ : state)
        benchmark::DoNotOptimize(k::reference::matmul(a, b));
}

void BM_AttentionOmp(benchmark::State& state) {
    set_threads(state);
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto q = random_matrix(n, 64, 8), kk = random_matrix(n, 64, 9), v = random_matrix(n, 64, 10);
    for (auto _ : state)
        benchmark::DoNotOptimize(k::scaled_dot_attention(q, kk, v));
}

void BM_AttentionReference(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto q = random_matrix(n, 64, 8), kk = random_matrix(n, 64, 9), v = random_matrix(n, 64, 10);
    for (auto _ : state)
        benchmark::DoNotOptimize(k::reference::scaled_dot_attention(q, kk, v));
}

void omp_args(benchmark::internal::Benchmark* b) {
    const int max_threads = omp_get_max_threads();
    for (int n : {1024, 4096})
        for (int t = 1; t <= max_threads; t *= 2)
            b->Args({n, t});
}

}  // namespace

BENCHMARK(BM_CosineOmp)->Apply(omp_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CosineReference)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_StreamingArgmaxOmp)->Apply(omp_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RestrictedArgmaxReference)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MatmulOmp)->Apply(omp_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MatmulReference)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_AttentionOmp)->Apply(omp_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_AttentionReference)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
