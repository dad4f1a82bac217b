// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include "clipmap/kernels.hpp"
#include "clipmap/rng.hpp"

using namespace clipmap;

namespace {

std::vector<Real> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> v(n);
  for (Real& x : v) x = rng.normal();
  return v;
}

void BM_GemmReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<Real> c(n * n);
  for (auto _ : state) {
    kernels::reference::gemm(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  kernels::set_num_threads(static_cast<int>(state.range(1)));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<Real> c(n * n);
  for (auto _ : state) {
    kernels::gemm(kernels::Trans::No, kernels::Trans::No, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
  kernels::set_num_threads(1);
}

constexpr std::size_t kBatch = 64, kSeq = 17, kWidth = 64, kHeads = 4;

void BM_AttentionReference(benchmark::State& state) {
  const std::size_t rows = kBatch * kSeq;
  const auto q = filled(rows * kWidth, 1), k = filled(rows * kWidth, 2), v = filled(rows * kWidth, 3);
  std::vector<Real> out(rows * kWidth);
  for (auto _ : state) {
    kernels::reference::attention_forward(q.data(), k.data(), v.data(), out.data(), kBatch, kSeq, kWidth, kHeads,
                                          state.range(0) != 0);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_Attention(benchmark::State& state) {
  kernels::set_num_threads(static_cast<int>(state.range(1)));
  const std::size_t rows = kBatch * kSeq;
  const auto q = filled(rows * kWidth, 1), k = filled(rows * kWidth, 2), v = filled(rows * kWidth, 3);
  std::vector<Real> out(rows * kWidth), probs(kBatch * kHeads * kSeq * kSeq);
  for (auto _ : state) {
    kernels::attention_forward(q.data(), k.data(), v.data(), out.data(), probs.data(), kBatch, kSeq, kWidth, kHeads,
                               state.range(0) != 0);
    benchmark::DoNotOptimize(out.data());
  }
  kernels::set_num_threads(1);
}

}  // namespace

BENCHMARK(BM_GemmReference)->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm)->ArgsProduct({{64, 256}, {1, 2, 4}});
BENCHMARK(BM_AttentionReference)->Arg(0)->Arg(1);
BENCHMARK(BM_Attention)->ArgsProduct({{0, 1}, {1, 2, 4}});

BENCHMARK_MAIN();
