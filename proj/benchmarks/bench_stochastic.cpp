#include <benchmark/benchmark.h>

#include "rnnafem/mesh.hpp"
#include "rnnafem/stochastic.hpp"

using namespace rnnafem;

namespace {

void BM_Eta(benchmark::State& state) {
  const Mesh m = uniform_refine(uniform_refine(l_shape()));
  const GradientSurrogate v = corner_singularity_gradient();
  const int order = static_cast<int>(state.range(0));
  for (auto _ : state)
    for (ElementId e = 0; e < m.num_elements(); ++e) benchmark::DoNotOptimize(eta(m, e, v, order));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.num_elements()));
}
BENCHMARK(BM_Eta)->Arg(8)->Arg(16);

void BM_McIndicator(benchmark::State& state) {
  const Mesh m = l_shape();
  const GradientSurrogate v = corner_singularity_gradient();
  CounterRng rng(42);
  const int n = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(mc_indicator(m, 1, v, n, rng));
}
BENCHMARK(BM_McIndicator)->Arg(1)->Arg(16);

void BM_GreedyRefine(benchmark::State& state) {
  const Mesh m = l_shape();
  const GradientSurrogate v = corner_singularity_gradient();
  for (auto _ : state) benchmark::DoNotOptimize(greedy_refine(m, v, 1e-3));
}
BENCHMARK(BM_GreedyRefine)->Unit(benchmark::kMillisecond);

void BM_StochasticGreedy(benchmark::State& state) {
  const Mesh m = l_shape();
  const GradientSurrogate v = corner_singularity_gradient();
  GreedyConfig cfg;
  cfg.eps = 1e-3;
  for (auto _ : state) benchmark::DoNotOptimize(stochastic_greedy_refine(m, v, cfg));
}
BENCHMARK(BM_StochasticGreedy)->Unit(benchmark::kMillisecond);

}  // namespace
