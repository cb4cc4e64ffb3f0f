#include <benchmark/benchmark.h>

#include <random>

#include "repcn/repcn.hpp"

using namespace repcn;

namespace {

template <typename T>
Tensor<T> filled(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<T>::uniform(shape, rng, T{-1}, T{1});
}

template <typename T>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = filled<T>({n, n}, 1), b = filled<T>({n, n}, 2);
  Tensor<T> c({n, n});
  for (auto _ : state) {
    kernels::gemm(n, n, n, a.raw(), n, b.raw(), n, c.raw(), n, false);
    benchmark::DoNotOptimize(c.raw());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Gemm<float>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<double>)->Arg(64)->Arg(128)->Arg(256);

// Shapes of the toy U-Net's 3x3 convolutions at batch 16.
void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  auto x = filled<float>({16, c, hw, hw}, 3);
  auto k = filled<float>({c, c, 3, 3}, 4);
  auto b = filled<float>({c}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, b, 1, 1));
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * 16 * c * c * 9 * hw * hw,
                                                 benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Conv3x3)->Args({16, 16})->Args({32, 8});

void BM_GroupNorm(benchmark::State& state) {
  auto x = filled<float>({16, 32, 16, 16}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(group_norm(x, 8, 1e-5f));
}
BENCHMARK(BM_GroupNorm);

}  // namespace
