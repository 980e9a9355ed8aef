// SPDX-License-Identifier: Apache-2.0
// Serial reference vs OpenMP kernels on desk-sized shapes.
//   ./bench_kernels --benchmark_counters_tabular=true
#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "advlab/kernels.hpp"

namespace k = advlab::kernels;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// First and second desk conv layers.
k::ConvGeometry geometry(int layer) {
  if (layer == 0) return {32, 64, 1, 8, 3, 3, 2, 1};
  return {16, 32, 8, 16, 3, 3, 2, 1};
}

struct ConvData {
  k::ConvGeometry g;
  std::vector<double> x, w, b, y, dy, dx, dw, db;
  explicit ConvData(int layer) : g(geometry(layer)) {
    x = noise(g.in_h * g.in_w * g.in_c, 1);
    w = noise(g.weight_size(), 2);
    b = noise(g.out_c, 3);
    y.assign(g.out_h() * g.out_w() * g.out_c, 0.0);
    dy = noise(y.size(), 4);
    dx.assign(x.size(), 0.0);
    dw.assign(w.size(), 0.0);
    db.assign(b.size(), 0.0);
  }
};

void set_threads(benchmark::State& state, int arg) {
  omp_set_num_threads(arg);
  state.counters["threads"] = arg;
}

void BM_ConvForwardReference(benchmark::State& state) {
  ConvData d(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    k::reference::conv2d_forward(d.g, d.x, d.w, d.b, d.y);
    benchmark::DoNotOptimize(d.y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d.g.macs()));
}

void BM_ConvForwardParallel(benchmark::State& state) {
  ConvData d(static_cast<int>(state.range(0)));
  set_threads(state, static_cast<int>(state.range(1)));
  for (auto _ : state) {
    k::conv2d_forward(d.g, d.x, d.w, d.b, d.y);
    benchmark::DoNotOptimize(d.y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d.g.macs()));
}

void BM_ConvBackwardReference(benchmark::State& state) {
  ConvData d(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    k::reference::conv2d_backward_input(d.g, d.dy, d.w, d.dx);
    k::reference::conv2d_backward_params(d.g, d.x, d.dy, d.dw, d.db);
    benchmark::DoNotOptimize(d.dx.data());
    benchmark::DoNotOptimize(d.dw.data());
  }
}

void BM_ConvBackwardParallel(benchmark::State& state) {
  ConvData d(static_cast<int>(state.range(0)));
  set_threads(state, static_cast<int>(state.range(1)));
  for (auto _ : state) {
    k::conv2d_backward_input(d.g, d.dy, d.w, d.dx);
    k::conv2d_backward_params(d.g, d.x, d.dy, d.dw, d.db);
    benchmark::DoNotOptimize(d.dx.data());
    benchmark::DoNotOptimize(d.dw.data());
  }
}

// Embedding positions x prototype bank, as in the prototype head.
struct CosineData {
  std::size_t s = 64, p = 18, d = 32;
  std::vector<double> a = noise(s * d, 5), bank = noise(p * d, 6), out = std::vector<double>(s * p),
                      an = std::vector<double>(s), bn = std::vector<double>(p);
};

void BM_CosineReference(benchmark::State& state) {
  CosineData c;
  for (auto _ : state) {
    k::reference::cosine_bank_forward(c.s, c.p, c.d, c.a, c.bank, c.out);
    benchmark::DoNotOptimize(c.out.data());
  }
}

void BM_CosineParallel(benchmark::State& state) {
  CosineData c;
  set_threads(state, static_cast<int>(state.range(0)));
  for (auto _ : state) {
    k::cosine_bank_forward(c.s, c.p, c.d, c.a, c.bank, c.out, c.an, c.bn);
    benchmark::DoNotOptimize(c.out.data());
  }
}

void BM_AffineForward(benchmark::State& state) {
  const std::size_t m = 512, n = 512;
  auto x = noise(n, 7), w = noise(m * n, 8), b = noise(m, 9);
  std::vector<double> y(m);
  set_threads(state, static_cast<int>(state.range(0)));
  for (auto _ : state) {
    k::affine_forward(m, n, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m * n));
}

void thread_args(benchmark::internal::Benchmark* b) {
  for (int layer : {0, 1})
    for (int t = 1; t <= k::max_threads(); t *= 2) b->Args({layer, t});
}

void thread_only(benchmark::internal::Benchmark* b) {
  for (int t = 1; t <= k::max_threads(); t *= 2) b->Arg(t);
}

}  // namespace

BENCHMARK(BM_ConvForwardReference)->Arg(0)->Arg(1);
BENCHMARK(BM_ConvForwardParallel)->Apply(thread_args)->UseRealTime();
BENCHMARK(BM_ConvBackwardReference)->Arg(0)->Arg(1);
BENCHMARK(BM_ConvBackwardParallel)->Apply(thread_args)->UseRealTime();
BENCHMARK(BM_CosineReference);
BENCHMARK(BM_CosineParallel)->Apply(thread_only)->UseRealTime();
BENCHMARK(BM_AffineForward)->Apply(thread_only)->UseRealTime();

BENCHMARK_MAIN();
