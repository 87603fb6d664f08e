#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace rnnafem {

/// Minimal-cardinality set M with sum_{M} rho^2 >= theta * sum rho^2 over
/// squared indicators; ties resolve to the earliest index. Returned sorted by
/// decreasing indicator (index order among equals).
std::vector<std::size_t> doerfler_mark(std::span<const double> rho_sq, double theta = 0.5);

/// All indices with value > (1 - theta) * max value (strict).
std::vector<std::size_t> maximum_strategy_mark(std::span<const double> values, double theta = 0.5);

/// Number of binary-search repetitions so that the rounding band of width
/// max/2^k stays within eps/n.
int mark_iterations(double max_value, std::size_t n, double eps);

struct PerturbedMarking {
  std::vector<std::size_t> marked;  // sorted ascending
  std::vector<double> snapped;      // the perturbed sequence x~
  double band_low = 0;
  double band_high = 0;
};

/// Classical replica of the marking network: k-step binary search for the
/// Doerfler cutoff, snap the band [y - 2z, y + 2z] to its upper edge, then a
/// minimal prefix with earliest-index tie-break. eps = 0 reduces to
/// doerfler_mark.
PerturbedMarking perturbed_doerfler_oracle(std::span<const double> rho_sq, double theta, double eps);
PerturbedMarking perturbed_doerfler_with_iterations(std::span<const double> rho_sq, double theta, int k);

}  // namespace rnnafem
