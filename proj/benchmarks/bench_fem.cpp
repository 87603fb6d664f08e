#include <benchmark/benchmark.h>

#include <vector>

#include "rnnafem/fem.hpp"
#include "rnnafem/marking.hpp"
#include "rnnafem/mesh.hpp"

using namespace rnnafem;

namespace {

// Adaptively refined L-shape with roughly `target` elements.
Mesh adapted_l_shape(std::size_t target) {
  Mesh m = l_shape();
  while (m.num_elements() < target) {
    const ElementField f = constant_source(m, 1.0);
    const auto rho = residual_estimator(m, solve_poisson(m, f).nodal, f);
    const auto marked = doerfler_mark(rho, 0.5);
    m = refine_nvb(m, std::vector<ElementId>(marked.begin(), marked.end()));
  }
  return m;
}

void BM_UniformRefine(benchmark::State& state) {
  Mesh m = l_shape();
  for (int i = 0; i < state.range(0); ++i) m = uniform_refine(m);
  for (auto _ : state) benchmark::DoNotOptimize(uniform_refine(m));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.num_elements()));
}
BENCHMARK(BM_UniformRefine)->DenseRange(3, 5);

void BM_SolvePoisson(benchmark::State& state) {
  const Mesh m = adapted_l_shape(static_cast<std::size_t>(state.range(0)));
  const ElementField f = constant_source(m, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(solve_poisson(m, f));
  state.counters["elements"] = static_cast<double>(m.num_elements());
}
BENCHMARK(BM_SolvePoisson)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_ResidualEstimator(benchmark::State& state) {
  const Mesh m = adapted_l_shape(static_cast<std::size_t>(state.range(0)));
  const ElementField f = constant_source(m, 1.0);
  const auto sol = solve_poisson(m, f);
  for (auto _ : state) benchmark::DoNotOptimize(residual_estimator(m, sol.nodal, f));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.num_elements()));
}
BENCHMARK(BM_ResidualEstimator)->Arg(10000);

void BM_DoerflerMark(benchmark::State& state) {
  const Mesh m = adapted_l_shape(static_cast<std::size_t>(state.range(0)));
  const ElementField f = constant_source(m, 1.0);
  const auto rho = residual_estimator(m, solve_poisson(m, f).nodal, f);
  for (auto _ : state) benchmark::DoNotOptimize(doerfler_mark(rho, 0.5));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rho.size()));
}
BENCHMARK(BM_DoerflerMark)->Arg(10000);

}  // namespace
