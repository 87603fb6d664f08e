#include <doctest.h>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "rnnafem/errors.hpp"
#include "rnnafem/marking.hpp"

using namespace rnnafem;

using Ids = std::vector<std::size_t>;

namespace {

double sum_of(const std::vector<double>& x, const Ids& ids) {
  double s = 0;
  for (std::size_t i : ids) s += x[i];
  return s;
}

std::vector<double> random_values(std::mt19937_64& gen, std::size_t n) {
  std::uniform_real_distribution<double> e(-6.0, 3.0);
  std::vector<double> x(n);
  for (double& v : x) v = std::pow(10.0, e(gen));
  return x;
}

Ids ascending(Ids ids) {
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

TEST_CASE("Doerfler marking") {
  const std::vector<double> x = {4, 3, 2, 1};
  const Ids m = doerfler_mark(x, 0.5);
  CHECK(m == Ids{0, 1});
  CHECK(sum_of(x, m) / 10.0 == doctest::Approx(0.7));
  CHECK(doerfler_mark(std::vector<double>{2, 0, 3}, 1.0) == Ids{2, 0});
  CHECK(doerfler_mark(std::vector<double>{1, 0, 0}, 0.3) == Ids{0});
  CHECK(doerfler_mark(std::vector<double>{0, 0, 0}, 0.5).empty());
  CHECK_THROWS_AS(doerfler_mark(x, 0.0), ValidationError);
  CHECK_THROWS_AS(doerfler_mark(x, 1.5), ValidationError);
  CHECK_THROWS_AS(doerfler_mark(std::vector<double>{1, -1}, 0.5), ValidationError);
}

TEST_CASE("Doerfler sets are minimal, monotone in theta and scale invariant") {
  std::mt19937_64 gen(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x = random_values(gen, 1 + gen() % 512);
    const double total = std::accumulate(x.begin(), x.end(), 0.0);
    const double theta = std::uniform_real_distribution<double>(0.05, 0.95)(gen);
    const Ids m = ascending(doerfler_mark(x, theta));
    CHECK(sum_of(x, m) >= theta * total);
    // the |M| - 1 largest values fall short
    std::vector<double> sorted = x;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double best_smaller = std::accumulate(sorted.begin(), sorted.begin() + static_cast<long>(m.size()) - 1, 0.0);
    CHECK(best_smaller < theta * total);

    const Ids bigger = ascending(doerfler_mark(x, std::min(1.0, theta + 0.05)));
    CHECK(std::includes(bigger.begin(), bigger.end(), m.begin(), m.end()));

    std::vector<double> scaled = x;
    for (double& v : scaled) v *= 0.25;
    CHECK(ascending(doerfler_mark(scaled, theta)) == m);
  }
}

TEST_CASE("maximum strategy") {
  const std::vector<double> x = {4, 3, 2, 1};
  CHECK(maximum_strategy_mark(x, 0.5) == Ids{0, 1});
  CHECK(maximum_strategy_mark(x, 0.999999) == Ids{0, 1, 2, 3});
  CHECK(maximum_strategy_mark(std::vector<double>{0, 2, 1}, 0.999999) == Ids{1, 2});
  CHECK(maximum_strategy_mark(std::vector<double>(5, 1.5), 0.3) == Ids{0, 1, 2, 3, 4});
}

TEST_CASE("perturbed Doerfler oracle") {
  std::mt19937_64 gen(4);
  for (int t = 0; t < 50; ++t) {
    const std::vector<double> x = random_values(gen, 1 + gen() % 300);
    const PerturbedMarking exact = perturbed_doerfler_oracle(x, 0.5, 0.0);
    CHECK(exact.marked == ascending(doerfler_mark(x, 0.5)));
    const PerturbedMarking p = perturbed_doerfler_oracle(x, 0.5, 1e-6);
    const bool band_empty =
        std::none_of(x.begin(), x.end(), [&](double v) { return v >= p.band_low && v <= p.band_high; });
    if (band_empty) CHECK(p.marked == ascending(doerfler_mark(x, 0.5)));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(p.snapped[i] - x[i]) <= 1e-6 / static_cast<double>(x.size()));
    const double total = std::accumulate(p.snapped.begin(), p.snapped.end(), 0.0);
    CHECK(sum_of(p.snapped, p.marked) >= 0.5 * total);
  }
}

TEST_CASE("ties at the cutoff go to the earliest indices") {
  std::vector<double> x = {1, 1, 3, 3, 3};
  do {
    Ids threes;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] == 3) threes.push_back(i);
    const Ids expect(threes.begin(), threes.begin() + 2);
    CHECK(perturbed_doerfler_oracle(x, 0.5, 1e-3).marked == expect);
    CHECK(doerfler_mark(x, 0.5) == expect);
  } while (std::next_permutation(x.begin(), x.end()));
}

TEST_CASE("iteration count for the marking network") {
  CHECK(mark_iterations(1.0, 10, 1e-6) > 0);
  CHECK(mark_iterations(1e3, 10, 1e-6) > mark_iterations(1.0, 10, 1e-6));
  CHECK_THROWS_AS(mark_iterations(1.0, 10, 0.0), ValidationError);
}
