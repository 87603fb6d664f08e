#include <benchmark/benchmark.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "rnnafem/adaptive.hpp"
#include "rnnafem/blocks.hpp"
#include "rnnafem/fem.hpp"
#include "rnnafem/marking.hpp"

using namespace rnnafem;

namespace {

std::vector<double> log_uniform(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> e(-6.0, 3.0);
  std::vector<double> x(n);
  for (double& v : x) v = std::pow(10.0, e(gen));
  return x;
}

void BM_BuildEstimator(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(build_estimator(static_cast<int>(state.range(0))));
}
BENCHMARK(BM_BuildEstimator)->Arg(40)->Unit(benchmark::kMillisecond);

void BM_EvalEstimator(benchmark::State& state) {
  Mesh m = l_shape();
  for (int i = 0; i < 3; ++i) m = uniform_refine(m);
  const ElementField f = constant_source(m, 1.0);
  const Sequence in = encode_estimator_inputs(m, solve_poisson(m, f).nodal, f);
  const BasicRnn est = build_estimator(40);
  for (auto _ : state) benchmark::DoNotOptimize(eval_basic_rnn(est, in));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.num_elements()));
}
BENCHMARK(BM_EvalEstimator)->Unit(benchmark::kMillisecond);

void BM_MarkNetwork(benchmark::State& state) {
  const auto x = log_uniform(static_cast<std::size_t>(state.range(0)), 1);
  const int k = mark_iterations(*std::max_element(x.begin(), x.end()), x.size(), 1e-6);
  const DeepRnn net = build_mark(0.5, k);
  const Sequence in = Sequence::from_scalars(x);
  for (auto _ : state) benchmark::DoNotOptimize(eval_deep_rnn(net, in));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MarkNetwork)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_MarkReplica(benchmark::State& state) {
  const auto x = log_uniform(static_cast<std::size_t>(state.range(0)), 1);
  const int k = mark_iterations(*std::max_element(x.begin(), x.end()), x.size(), 1e-6);
  for (auto _ : state) benchmark::DoNotOptimize(perturbed_doerfler_with_iterations(x, 0.5, k));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MarkReplica)->Arg(10000);

void BM_SquareBlock(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const DeepRnn sq = build_square(n);
  double x = 0.123;
  for (auto _ : state) {
    benchmark::DoNotOptimize(eval_at_last(sq, static_cast<std::size_t>(n), std::span(&x, 1)));
  }
}
BENCHMARK(BM_SquareBlock)->Arg(4)->Arg(8);

}  // namespace
