#include <benchmark/benchmark.h>

#include "rml/kernels.hpp"
#include "rml/rng.hpp"

// Compares the OpenMP kernels against the serial reference at sizes typical
// for this project. Run with --benchmark_filter=matmul etc.

using rml::Tensor;
namespace K = rml::kernels;

namespace {

Tensor random_tensor(uint64_t seed, int r, int c) {
  rml::Rng rng(seed);
  Tensor t(r, c);
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

void bm_matmul_ref(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor a = random_tensor(1, n, n), b = random_tensor(2, n, n);
  for (auto _ : state) benchmark::DoNotOptimize(K::ref::matmul(a, b));
}

void bm_matmul_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor a = random_tensor(1, n, n), b = random_tensor(2, n, n);
  for (auto _ : state) benchmark::DoNotOptimize(K::matmul(a, b));
}

void bm_softmax_ref(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor a = random_tensor(3, n, n);
  for (auto _ : state) benchmark::DoNotOptimize(K::ref::softmax_rows(a));
}

void bm_softmax_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor a = random_tensor(3, n, n);
  for (auto _ : state) benchmark::DoNotOptimize(K::softmax_rows(a));
}

void bm_layernorm_ref(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor x = random_tensor(4, n, n);
  Tensor g = random_tensor(5, 1, n), b = random_tensor(6, 1, n);
  for (auto _ : state)
    benchmark::DoNotOptimize(K::ref::layernorm_rows(x, g, b, 1e-5));
}

void bm_layernorm_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor x = random_tensor(4, n, n);
  Tensor g = random_tensor(5, 1, n), b = random_tensor(6, 1, n);
  for (auto _ : state)
    benchmark::DoNotOptimize(K::layernorm_rows(x, g, b, 1e-5));
}

void bm_cross_entropy_ref(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor logits = random_tensor(7, n, 512);
  std::vector<int> targets(n);
  rml::Rng rng(8);
  for (auto& t : targets) t = rng.uniform_int(0, 511);
  for (auto _ : state)
    benchmark::DoNotOptimize(K::ref::cross_entropy_rows(logits, targets));
}

void bm_cross_entropy_omp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Tensor logits = random_tensor(7, n, 512);
  std::vector<int> targets(n);
  rml::Rng rng(8);
  for (auto& t : targets) t = rng.uniform_int(0, 511);
  for (auto _ : state)
    benchmark::DoNotOptimize(K::cross_entropy_rows(logits, targets));
}

}  // namespace

BENCHMARK(bm_matmul_ref)->Arg(32)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_omp)->Arg(32)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_softmax_ref)->Arg(64)->Arg(256);
BENCHMARK(bm_softmax_omp)->Arg(64)->Arg(256);
BENCHMARK(bm_layernorm_ref)->Arg(64)->Arg(256);
BENCHMARK(bm_layernorm_omp)->Arg(64)->Arg(256);
BENCHMARK(bm_cross_entropy_ref)->Arg(16)->Arg(64);
BENCHMARK(bm_cross_entropy_omp)->Arg(16)->Arg(64);

BENCHMARK_MAIN();
